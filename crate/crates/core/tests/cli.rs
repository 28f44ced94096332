use std::path::{Path, PathBuf};

use effirlab::cli::run_cli;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("effirlab").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn init(dir: &Path) {
    let cfg = tiny();
    assert_eq!(run(&["init", "--config", s(&cfg), "--out", s(dir)]), 0);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["drop", "--model", "x"]), 1);
    let missing = dir.path().join("nope");
    assert_eq!(run(&["profile", "--model", s(&missing), "--out", s(&dir.path().join("r.json"))]), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(run(&["init", "--config", s(&bad), "--out", s(dir.path())]), 1);
}

#[test]
fn profile_is_deterministic_and_drop_checks_the_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    init(d);
    let cfg = tiny();
    let base = d.join("base");
    let (r1, r2) = (d.join("p1/report.json"), d.join("p2/report.json"));
    assert_eq!(run(&["profile", "--config", s(&cfg), "--model", s(&base), "--out", s(&r1)]), 0);
    assert_eq!(run(&["profile", "--config", s(&cfg), "--model", s(&base), "--out", s(&r2)]), 0);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert!(d.join("p1/report.heatmap.svg").is_file());
    assert!(d.join("p1/report.meta.json").is_file());

    let dropped = d.join("dropped");
    assert_eq!(
        run(&["drop", "--config", s(&cfg), "--model", s(&base), "--report", s(&r1), "--mode", "mlp", "--k-mlp", "1", "--out", s(&dropped)]),
        0
    );
    // a report belongs to one model
    assert_eq!(
        run(&["drop", "--config", s(&cfg), "--model", s(&dropped), "--report", s(&r1), "--out", s(&d.join("again"))]),
        1
    );
    let diff: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dropped.join("diff.json")).unwrap()).unwrap();
    let delta = diff["params_before"].as_u64().unwrap() - diff["params_after"].as_u64().unwrap();
    assert_eq!(delta, diff["expected_delta"].as_u64().unwrap());
    assert_eq!(delta, 3 * 8 * 16 + 8);
}

#[test]
fn slim_train_eval_bench_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    init(d);
    let cfg = tiny();
    let data = d.join("data/train.jsonl");
    let corpus = d.join("data/eval");
    let slim = d.join("slim");
    assert_eq!(run(&["slim", "--config", s(&cfg), "--model", s(&d.join("base")), "--data", s(&data), "--out", s(&slim)]), 0);
    // slimming twice is refused
    assert_eq!(run(&["slim", "--config", s(&cfg), "--model", s(&slim), "--data", s(&data), "--out", s(&d.join("x"))]), 1);
    let fin = d.join("final");
    assert_eq!(run(&["train", "--config", s(&cfg), "--model", s(&slim), "--data", s(&data), "--out", s(&fin)]), 0);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fin.join("summary.json")).unwrap()).unwrap();
    assert_eq!(t["params"], t["predicted_params"]);
    assert_eq!(run(&["eval", "--config", s(&cfg), "--model", s(&fin), "--corpus", s(&corpus), "--out", s(&d.join("eval"))]), 0);
    let trec = std::fs::read_to_string(d.join("eval/run.trec")).unwrap();
    assert_eq!(trec.lines().next().unwrap().split_whitespace().count(), 6);
    assert_eq!(run(&["eval", "--config", s(&cfg), "--keyword-overlap", "--corpus", s(&corpus), "--out", s(&d.join("kw"))]), 0);
    let kw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("kw/ndcg.json")).unwrap()).unwrap();
    assert!((kw["ndcg"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let bench = d.join("bench.json");
    assert_eq!(run(&["bench", "--config", s(&cfg), "--model", s(&fin), "--baseline", s(&d.join("base")), "--out", s(&bench)]), 0);
    assert!(bench.is_file());
    assert_eq!(run(&["report", "--run", s(d), "--out", s(&d.join("report.md"))]), 0);
    assert!(std::fs::read_to_string(d.join("report.md")).unwrap().contains("nDCG@10"));
}

#[test]
fn run_stage_pipeline_and_lora_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny();
    assert_eq!(run(&["run", "--config", s(&cfg), "--out", s(d)]), 0);
    for f in ["summary.json", "report.md", "bench.json", "final/manifest.json", "profile/report.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let lora = d.join("lora");
    let data = d.join("data/train.jsonl");
    assert_eq!(run(&["train", "--config", s(&cfg), "--lora", "--model", s(&d.join("base")), "--data", s(&data), "--out", s(&lora)]), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(lora.join("manifest.json")).unwrap()).unwrap();
    assert!(!m["lora"].is_null());
}
