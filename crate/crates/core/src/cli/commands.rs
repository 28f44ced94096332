use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Stage};
use super::meta::{meta_path, read_json, write_json, write_text, RunMeta};
use crate::checkpoint::{self, CheckpointMeta};
use crate::encoder::{EncoderModel, Group};
use crate::error::{Error, Result};
use crate::evalbench::{
    brute_force_search, heatmap_svg, ndcg_at_k, ndcg_per_query, search_with_scorer, throughput_bench, BenchReport,
    EvalCorpus, HeatMap, RunResult,
};
use crate::redundancy::{apply_drop, plan_for_mode, score_sublayers, CalibrationSet, DropOrder, ImportanceReport, PruningPlan};
use crate::retrieval::{read_triplets, train, write_triplets, KeywordOverlap, TrainLog, TRAIN_FILE};
use crate::slimming::{apply_mask, global_prune, predicted_params, shrink, slim_train, PruneMask, SlimLog, SlimState};

pub const DATA_DIR: &str = "data";
pub const EVAL_DIR: &str = "eval";

pub const DISTILL_FORM: &str = "kl(softmax(teacher/tau) || softmax(student/tau)), mean over batch";

fn load_model(dir: &Path) -> Result<(EncoderModel<f32>, CheckpointMeta)> {
    let (m, manifest) = checkpoint::load(dir)?;
    Ok((m, manifest.meta))
}

fn with_history(mut meta: CheckpointMeta, step: &str) -> CheckpointMeta {
    meta.history.push(step.to_string());
    meta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub params: usize,
    pub train_examples: usize,
    pub eval_queries: usize,
    pub docs: usize,
    pub trained: bool,
    pub final_loss: Option<f64>,
}

/// Generate the synthetic dataset under `out/data` and a (trained) base
/// checkpoint under `out/base`.
pub fn cmd_init(cfg: &ExperimentConfig, out: &Path, train_base: bool) -> Result<InitSummary> {
    cfg.validate()?;
    let mut task = cfg.task.clone();
    task.seed = cfg.stage_seed("task");
    let data = task.generate()?;
    let data_dir = out.join(DATA_DIR);
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    write_triplets(&data_dir.join(TRAIN_FILE), &data.train)?;
    data.eval.save(&data_dir.join(EVAL_DIR))?;
    write_json(&data_dir.join("task.json"), &task)?;

    let mut model = EncoderModel::new(cfg.model.clone(), cfg.stage_seed("init"))?;
    let mut log = TrainLog::default();
    let mut tc = cfg.base_train.clone();
    tc.seed = cfg.stage_seed("base_train");
    if train_base {
        log = train(&mut model, &data.train, &tc)?;
    }
    let base = out.join("base");
    let meta = CheckpointMeta { seed: cfg.seed, history: vec!["init".into()], ..Default::default() };
    checkpoint::save(&model, &meta, &base)?;
    write_json(&base.join("train_log.json"), &log)?;
    let summary = InitSummary {
        params: model.count_params(),
        train_examples: data.train.len(),
        eval_queries: data.eval.queries.len(),
        docs: data.eval.docs.len(),
        trained: train_base,
        final_loss: log.final_loss(),
    };
    write_json(&base.join("summary.json"), &summary)?;
    let meta = RunMeta::new("init", &(cfg, train_base), cfg.seed).choice("distillation", DISTILL_FORM);
    write_json(&meta_path(&base), &meta)?;
    write_json(&meta_path(&data_dir), &RunMeta::new("init", &task, cfg.seed))?;
    Ok(summary)
}

pub fn calibration_for(cfg: &ExperimentConfig, model: &EncoderModel<f32>) -> Result<CalibrationSet> {
    let len = cfg.profile.calibration_len.min(model.config.max_seq_len);
    let seed = cfg.stage_seed("profile");
    if cfg.profile.random_tokens {
        CalibrationSet::random_tokens(model.config.vocab_size, cfg.profile.calibration_samples, len, seed)
    } else {
        CalibrationSet::from_task(&cfg.task, cfg.profile.calibration_samples, len, seed)
    }
}

/// Score every sublayer; writes the report plus heat-map data beside it.
pub fn cmd_profile(cfg: &ExperimentConfig, model_dir: &Path, out: &Path) -> Result<ImportanceReport> {
    let (model, _) = load_model(model_dir)?;
    let calib = calibration_for(cfg, &model)?;
    let report = score_sublayers(&model, &calib)?;
    write_json(out, &report)?;
    let map = HeatMap::from_report(&report);
    let stem = out.with_extension("");
    write_text(&stem.with_extension("heatmap.csv"), &map.to_csv())?;
    write_text(&stem.with_extension("heatmap.svg"), &heatmap_svg(&map))?;
    write_text(&stem.with_extension("drop_order.csv"), &DropOrder::from_report(&report).to_csv())?;
    let meta = RunMeta::new("profile", &cfg.profile, calib.seed)
        .input("model", model_dir)
        .choice("calibration", if cfg.profile.random_tokens { "random-tokens" } else { "task-corpus" })
        .choice("aggregation", report.meta.aggregation.clone());
    write_json(&meta_path(out), &meta)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub plan: PruningPlan,
    pub params_before: usize,
    pub params_after: usize,
    pub removed_attn: Vec<usize>,
    pub removed_mlp: Vec<usize>,
    /// `|removed_attn|·(4d² + d) + |removed_mlp|·(3dn + d)`
    pub expected_delta: usize,
}

pub fn cmd_drop(cfg: &ExperimentConfig, model_dir: &Path, report_path: &Path, out: &Path) -> Result<DropSummary> {
    let (model, meta) = load_model(model_dir)?;
    let report: ImportanceReport = read_json(report_path)?;
    if report.meta.model_fingerprint != model.fingerprint() {
        return Err(Error::contract(format!(
            "report {} was computed for model {} but {} is {}",
            report_path.display(),
            &report.meta.model_fingerprint[..12.min(report.meta.model_fingerprint.len())],
            model_dir.display(),
            &model.fingerprint()[..12]
        )));
    }
    let k_attn = cfg.drop.k_attn.unwrap_or(model.present_count(Group::Attn));
    let k_mlp = cfg.drop.k_mlp.unwrap_or(model.present_count(Group::Mlp));
    let plan = plan_for_mode(&report, cfg.drop.mode, k_attn, k_mlp)?;
    let pruned = apply_drop(&model, &plan)?;
    let removed_attn = plan.dropped(Group::Attn, &report.present_attn);
    let removed_mlp = plan.dropped(Group::Mlp, &report.present_mlp);
    let c = &model.config;
    let mlp_cost = |l: usize| model.blocks[l].mlp.as_ref().map_or(0, |s| 3 * c.d_model * s.mlp.width() + c.d_model);
    let summary = DropSummary {
        params_before: model.count_params(),
        params_after: pruned.count_params(),
        expected_delta: removed_attn.len() * c.attn_sublayer_params() + removed_mlp.iter().map(|&l| mlp_cost(l)).sum::<usize>(),
        removed_attn,
        removed_mlp,
        plan: plan.clone(),
    };
    let mut meta = with_history(meta, &format!("drop:{:?}", plan.mode));
    meta.pruning = Some(plan);
    checkpoint::save(&pruned, &meta, out)?;
    write_json(&out.join("diff.json"), &summary)?;
    let run = RunMeta::new("drop", &cfg.drop, cfg.seed).input("model", model_dir).input("report", report_path);
    write_json(&meta_path(out), &run)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimSummary {
    pub mask: PruneMask,
    pub zeros: usize,
    pub gated: usize,
    pub first_surrogate: f64,
    pub last_surrogate: f64,
    pub final_infonce: f64,
}

/// Train gates, choose the global mask and freeze it into the checkpoint.
pub fn cmd_slim(cfg: &ExperimentConfig, model_dir: &Path, data: &Path, out: &Path) -> Result<SlimSummary> {
    let (mut model, meta) = load_model(model_dir)?;
    if SlimState::of(&model).frozen.iter().any(|&f| f) {
        return Err(Error::contract("model already carries a frozen slimming mask; run `train` to shrink it"));
    }
    let triplets = read_triplets(data)?;
    let mut sc = cfg.slim.clone();
    sc.seed = cfg.stage_seed("slim");
    let log: SlimLog = slim_train(&mut model, &triplets, &sc)?;
    let mask = global_prune(&SlimState::of(&model), sc.prune_ratio)?;
    apply_mask(&mut model, &mask)?;
    let mut meta = with_history(meta, "slim");
    meta.slim_mask = Some(mask.clone());
    checkpoint::save(&model, &meta, out)?;
    write_json(&out.join("mask.json"), &mask)?;
    write_json(&out.join("slim_log.json"), &log)?;
    let summary = SlimSummary {
        zeros: mask.zeros(),
        gated: mask.total(),
        first_surrogate: log.steps.first().map_or(0.0, |s| s.surrogate),
        last_surrogate: log.steps.last().map_or(0.0, |s| s.surrogate),
        final_infonce: log.steps.last().map_or(0.0, |s| s.infonce),
        mask,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let run = RunMeta::new("slim", &sc, sc.seed)
        .input("model", model_dir)
        .input("data", data)
        .choice("surrogate", "sum sigmoid(beta*|relu(z)|)")
        .choice("trainable", "gates only");
    write_json(&meta_path(out), &run)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub params: usize,
    pub shrunk: bool,
    pub predicted_params: Option<usize>,
}

/// Contrastive training; a model carrying a frozen mask is shrunk afterwards.
pub fn cmd_train(cfg: &ExperimentConfig, model_dir: &Path, data: &Path, out: &Path) -> Result<TrainSummary> {
    let (mut model, meta) = load_model(model_dir)?;
    let state = SlimState::of(&model);
    if state.z.iter().zip(&state.frozen).any(|(z, &f)| z.is_some() && !f) {
        return Err(Error::contract("model has trainable gates; finish `slim` (mask selection) before training"));
    }
    let triplets = read_triplets(data)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.stage_seed("train");
    let log = train(&mut model, &triplets, &tc)?;
    let mut meta = with_history(meta, "train");
    let mask = meta.slim_mask.clone().filter(|_| model.has_gates());
    let (final_model, predicted) = match &mask {
        Some(mask) => {
            let predicted = predicted_params(&model, mask);
            let s = shrink(&model, mask)?;
            meta.history.push("shrink".into());
            (s, Some(predicted))
        }
        None => (model, None),
    };
    checkpoint::save(&final_model, &meta, out)?;
    write_json(&out.join("train_log.json"), &log)?;
    let summary = TrainSummary {
        steps: log.steps.len(),
        first_loss: log.steps.first().map(|s| s.total),
        final_loss: log.final_loss(),
        params: final_model.count_params(),
        shrunk: predicted.is_some(),
        predicted_params: predicted,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let run = RunMeta::new("train", &tc, tc.seed)
        .input("model", model_dir)
        .input("data", data)
        .choice("distillation", DISTILL_FORM)
        .choice("trainable", if tc.lora.is_some() { "lora adapters" } else { "all dense parameters" })
        .choice("optimizer", format!("adam, {} warm-up steps", tc.warmup_steps));
    write_json(&meta_path(out), &run)?;
    Ok(summary)
}

pub enum EvalTarget<'a> {
    Model(&'a Path),
    KeywordOverlap { n_keywords: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub k: usize,
    pub ndcg: f64,
    pub queries: usize,
    pub per_query: std::collections::BTreeMap<String, f64>,
}

/// nDCG@k plus a TREC run file.
pub fn cmd_eval(cfg: &ExperimentConfig, target: EvalTarget<'_>, corpus_dir: &Path, out: &Path) -> Result<EvalSummary> {
    let corpus = EvalCorpus::load(corpus_dir)?;
    let k = cfg.eval.k;
    let (run, tag, meta): (RunResult, &str, RunMeta) = match target {
        EvalTarget::Model(dir) => {
            let (m, _) = load_model(dir)?;
            (brute_force_search(&m, &corpus, k)?, "dense", RunMeta::new("eval", &cfg.eval, cfg.seed).input("model", dir))
        }
        EvalTarget::KeywordOverlap { n_keywords } => (
            search_with_scorer(&KeywordOverlap { n_keywords }, &corpus, k)?,
            "keyword-overlap",
            RunMeta::new("eval", &(&cfg.eval, n_keywords), cfg.seed).choice("scorer", "keyword-overlap"),
        ),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    run.write_trec(&out.join("run.trec"), tag)?;
    let per_query = ndcg_per_query(&run, &corpus.qrels, k)?;
    let summary = EvalSummary { k, ndcg: ndcg_at_k(&run, &corpus.qrels, k)?, queries: per_query.len(), per_query };
    write_json(&out.join("ndcg.json"), &summary)?;
    write_json(&meta_path(out), &meta.input("corpus", corpus_dir))?;
    Ok(summary)
}

pub fn cmd_bench(cfg: &ExperimentConfig, model_dir: &Path, baseline: Option<&Path>, out: &Path) -> Result<BenchReport> {
    let (model, _) = load_model(model_dir)?;
    let base = baseline.map(load_model).transpose()?;
    let name = model_dir.display().to_string();
    let base_name = baseline.map(|p| p.display().to_string());
    let report = throughput_bench(
        &model,
        &name,
        base.as_ref().zip(base_name.as_deref()).map(|((b, _), n)| (n, b)),
        &cfg.bench,
    )?;
    write_json(out, &report)?;
    let mut meta = RunMeta::new("bench", &cfg.bench, cfg.bench.seed).input("model", model_dir).choice("threads", "1");
    if let Some(b) = baseline {
        meta = meta.input("baseline", b);
    }
    write_json(&meta_path(out), &meta)?;
    Ok(report)
}

/// Known artifacts of a pipeline directory, in stage order.
pub fn artifact_paths(run: &Path) -> Vec<(&'static str, PathBuf)> {
    vec![
        ("base model", run.join("base").join("summary.json")),
        ("importance", run.join("profile").join("report.json")),
        ("drop", run.join("dropped").join("diff.json")),
        ("slim", run.join("slim").join("summary.json")),
        ("retrain", run.join("final").join("summary.json")),
        ("base eval", run.join("eval_base").join("ndcg.json")),
        ("final eval", run.join("eval").join("ndcg.json")),
        ("bench", run.join("bench.json")),
    ]
}

/// Human-readable summary of whatever stages a run directory holds.
pub fn cmd_report(run: &Path, out: Option<&Path>) -> Result<String> {
    let mut s = format!("# Run report: {}\n\n", run.display());
    let mut found = 0;
    for (label, path) in artifact_paths(run) {
        if !path.is_file() {
            continue;
        }
        found += 1;
        let v: serde_json::Value = read_json(&path)?;
        s.push_str(&format!("## {label}\n\n"));
        match label {
            "importance" => {
                let r: ImportanceReport = serde_json::from_value(v).map_err(|e| Error::parse(path.display().to_string(), e))?;
                s.push_str("| layer | attn | mlp |\n|---|---|---|\n");
                for l in 0..r.n_layers() {
                    s.push_str(&format!("| {l} | {:.5} | {:.5} |\n", r.attn[l], r.mlp[l]));
                }
            }
            "base eval" | "final eval" => {
                s.push_str(&format!("nDCG@{} = {:.4} over {} queries\n", v["k"], v["ndcg"].as_f64().unwrap_or(f64::NAN), v["queries"]));
            }
            _ => {
                let mut v = v;
                if let Some(o) = v.as_object_mut() {
                    o.remove("mask");
                    o.remove("per_query");
                }
                s.push_str(&format!("```json\n{}\n```\n", serde_json::to_string_pretty(&v).unwrap_or_default()));
            }
        }
        s.push('\n');
    }
    if found == 0 {
        return Err(Error::contract(format!("{} holds no run artifacts", run.display())));
    }
    if let Some(out) = out {
        write_text(out, &s)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub seed: u64,
    pub base: InitSummary,
    pub base_ndcg: f64,
    pub importance: Option<ImportanceReport>,
    pub drop: Option<DropSummary>,
    pub slim: Option<SlimSummary>,
    pub train: Option<TrainSummary>,
    pub final_params: usize,
    pub final_ndcg: Option<f64>,
    pub final_fingerprint: String,
}

/// Run every configured stage from one root seed. Numeric outputs land in
/// `summary.json`; timings only in `bench.json`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<(PipelineSummary, Option<BenchReport>)> {
    cfg.validate()?;
    let base_summary = cmd_init(cfg, out, true)?;
    let data = out.join(DATA_DIR).join(TRAIN_FILE);
    let corpus = out.join(DATA_DIR).join(EVAL_DIR);
    let base = out.join("base");
    let base_eval = cmd_eval(cfg, EvalTarget::Model(&base), &corpus, &out.join("eval_base"))?;
    let mut current = base.clone();
    let has = |s: Stage| cfg.stages.contains(&s);

    let importance = if has(Stage::Profile) {
        Some(cmd_profile(cfg, &current, &out.join("profile").join("report.json"))?)
    } else {
        None
    };
    let drop = if has(Stage::Drop) {
        let d = cmd_drop(cfg, &current, &out.join("profile").join("report.json"), &out.join("dropped"))?;
        current = out.join("dropped");
        Some(d)
    } else {
        None
    };
    let slim = if has(Stage::Slim) {
        let s = cmd_slim(cfg, &current, &data, &out.join("slim"))?;
        current = out.join("slim");
        Some(s)
    } else {
        None
    };
    let train = if has(Stage::Train) {
        let t = cmd_train(cfg, &current, &data, &out.join("final"))?;
        current = out.join("final");
        Some(t)
    } else {
        None
    };
    let final_ndcg = if has(Stage::Eval) {
        Some(cmd_eval(cfg, EvalTarget::Model(&current), &corpus, &out.join("eval"))?.ndcg)
    } else {
        None
    };
    let bench = if has(Stage::Bench) {
        Some(cmd_bench(cfg, &current, Some(&base), &out.join("bench.json"))?)
    } else {
        None
    };
    let (final_model, _) = load_model(&current)?;
    let summary = PipelineSummary {
        config_hash: super::config::config_hash(cfg),
        seed: cfg.seed,
        base: base_summary,
        base_ndcg: base_eval.ndcg,
        importance,
        drop,
        slim,
        train,
        final_params: final_model.count_params(),
        final_ndcg,
        final_fingerprint: final_model.fingerprint(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    cmd_report(out, Some(&out.join("report.md")))?;
    Ok((summary, bench))
}
