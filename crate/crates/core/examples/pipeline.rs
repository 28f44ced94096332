//! The whole coarse-to-fine flow from one config: base training, profile,
//! MLP drop, slimming, retraining, evaluation and benchmark.
//!
//! `cargo run --release --example pipeline -- [config.toml] [out-dir]`
use std::path::PathBuf;

use effirlab::cli::{run_pipeline, ExperimentConfig};

fn main() -> effirlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg_path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("effirlab-pipeline"));
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let (summary, bench) = run_pipeline(&cfg, &out)?;
    println!("params {} -> {}", summary.base.params, summary.final_params);
    println!("nDCG@10 {:.4} -> {:.4}", summary.base_ndcg, summary.final_ndcg.unwrap_or(f64::NAN));
    if let Some(b) = bench {
        println!("query speedup {:.3}, doc speedup {:.3}", b.query.speedup.unwrap_or(1.0), b.doc.speedup.unwrap_or(1.0));
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
