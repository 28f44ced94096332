//! Command-line front end. Every subcommand is a thin wrapper over a
//! `cmd_*` function so the same flow is scriptable from Rust.

pub mod commands;
pub mod config;
pub mod meta;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::*;
pub use config::{config_hash, split_seed, ExperimentConfig, Stage};
pub use meta::RunMeta;

use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::redundancy::DropMode;

#[derive(Parser, Debug)]
#[command(name = "effirlab", version, about = "Compress and evaluate small dense-retrieval encoders")]
pub struct Cli {
    /// Worker threads for encoding (benchmarks always time one thread).
    #[arg(long, global = true, env = "EFFIRLAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Attn,
    Mlp,
    Block,
    Combined,
}

impl From<ModeArg> for DropMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Attn => DropMode::AttnOnly,
            ModeArg::Mlp => DropMode::MlpOnly,
            ModeArg::Block => DropMode::Block,
            ModeArg::Combined => DropMode::Combined,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Last,
    Mean,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic task and a base checkpoint.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        /// Save the randomly initialised model without base training.
        #[arg(long)]
        no_train: bool,
    },
    /// Score every sublayer by how little it changes the residual stream.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        random_tokens: bool,
    },
    /// Remove the least important sublayers; `--k-*` are retained counts.
    Drop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        k_attn: Option<usize>,
        #[arg(long)]
        k_mlp: Option<usize>,
    },
    /// Learn MLP neuron gates, then freeze a global mask.
    Slim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Contrastive training; shrinks a masked model afterwards.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train LoRA adapters instead of dense weights.
        #[arg(long)]
        lora: bool,
    },
    /// nDCG@k and a TREC run over a saved corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "keyword_overlap")]
        model: Option<PathBuf>,
        /// Score with the keyword-overlap reference instead of a model.
        #[arg(long, conflicts_with = "model")]
        keyword_overlap: bool,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Single-thread encoding throughput, optionally against a baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Markdown summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every configured stage end to end.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finish(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<S: serde::Serialize>(v: &S) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { common, out, pooling, no_train } => {
            let mut cfg = base_config(&common)?;
            if let Some(p) = pooling {
                cfg.model.pooling = match p {
                    PoolingArg::Last => Pooling::LastToken,
                    PoolingArg::Mean => Pooling::Mean,
                };
            }
            print_json(&cmd_init(&finish(cfg)?, &out, !no_train)?);
        }
        Command::Profile { common, model, out, samples, len, random_tokens } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = samples {
                cfg.profile.calibration_samples = s;
            }
            if let Some(l) = len {
                cfg.profile.calibration_len = l;
            }
            cfg.profile.random_tokens |= random_tokens;
            let r = cmd_profile(&finish(cfg)?, &model, &out)?;
            for l in 0..r.n_layers() {
                println!("layer {l:2}  attn {:.6}  mlp {:.6}", r.attn[l], r.mlp[l]);
            }
        }
        Command::Drop { common, model, report, out, mode, k_attn, k_mlp } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = mode {
                cfg.drop.mode = m.into();
            }
            if k_attn.is_some() {
                cfg.drop.k_attn = k_attn;
            }
            if k_mlp.is_some() {
                cfg.drop.k_mlp = k_mlp;
            }
            print_json(&cmd_drop(&finish(cfg)?, &model, &report, &out)?);
        }
        Command::Slim { common, model, data, out, ratio, lambda, steps } => {
            let mut cfg = base_config(&common)?;
            if let Some(r) = ratio {
                cfg.slim.prune_ratio = r;
            }
            if let Some(l) = lambda {
                cfg.slim.lambda = l;
            }
            if let Some(s) = steps {
                cfg.slim.steps = s;
            }
            let mut s = cmd_slim(&finish(cfg)?, &model, &data, &out)?;
            s.mask.layers.clear();
            print_json(&s);
        }
        Command::Train { common, model, data, out, tau, lr, epochs, lora } => {
            let mut cfg = base_config(&common)?;
            if let Some(t) = tau {
                cfg.train.tau = t;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if lora && cfg.train.lora.is_none() {
                cfg.train.lora = Some(Default::default());
            }
            print_json(&cmd_train(&finish(cfg)?, &model, &data, &out)?);
        }
        Command::Eval { common, model, keyword_overlap, corpus, out, k } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            let cfg = finish(cfg)?;
            let target = match (&model, keyword_overlap) {
                (_, true) => EvalTarget::KeywordOverlap { n_keywords: cfg.task.n_keywords },
                (Some(m), false) => EvalTarget::Model(m),
                (None, false) => return Err(Error::Config("eval needs --model or --keyword-overlap".into())),
            };
            let s = cmd_eval(&cfg, target, &corpus, &out)?;
            println!("nDCG@{} = {:.4} over {} queries", s.k, s.ndcg, s.queries);
        }
        Command::Bench { common, model, baseline, out, reps } => {
            let mut cfg = base_config(&common)?;
            if let Some(r) = reps {
                cfg.bench.repetitions = r;
            }
            print_json(&cmd_bench(&finish(cfg)?, &model, baseline.as_deref(), &out)?);
        }
        Command::Report { run, out } => {
            print!("{}", cmd_report(&run, out.as_deref())?);
        }
        Command::Run { common, out } => {
            let cfg = finish(base_config(&common)?)?;
            let (s, _) = run_pipeline(&cfg, &out)?;
            println!(
                "base nDCG {:.4}  final nDCG {}  params {} → {}",
                s.base_ndcg,
                s.final_ndcg.map_or("-".into(), |v| format!("{v:.4}")),
                s.base.params,
                s.final_params
            );
        }
    }
    Ok(())
}

/// Parse, run and map the outcome to an exit code: 0 success, 1 bad
/// usage or input, 2 a failure while computing.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}
