use serde::{Deserialize, Serialize};

use super::bench::{throughput_bench, Workload};
use super::heatmap::HeatMap;
use super::{brute_force_search, ndcg_at_k, EvalCorpus};
use crate::encoder::{EncoderModel, Group};
use crate::error::{ensure, Result};
use crate::redundancy::{apply_drop, plan_for_mode, score_sublayers, CalibrationSet, DropMode, ImportanceReport};
use crate::retrieval::{train, TrainConfig, Triplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedundancyConfig {
    /// Number of sublayers (or blocks) removed per variant.
    pub drop_counts: Vec<usize>,
    pub modes: Vec<DropMode>,
    /// Re-train every dropped variant with this configuration as well.
    pub refinetune: Option<TrainConfig>,
    pub bench: Option<Workload>,
    pub ndcg_k: usize,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        Self {
            drop_counts: vec![0, 2, 4],
            modes: vec![DropMode::AttnOnly, DropMode::MlpOnly, DropMode::Block],
            refinetune: None,
            bench: None,
            ndcg_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub mode: Option<DropMode>,
    pub k: usize,
    pub refinetuned: bool,
    pub ndcg: f64,
    pub params: usize,
    pub expected_params: usize,
    pub query_speedup: Option<f64>,
    pub doc_speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<VariantRow>,
    pub importance: ImportanceReport,
    pub heatmap: HeatMap,
}

impl ExperimentReport {
    pub fn row(&self, mode: Option<DropMode>, k: usize, refinetuned: bool) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.mode == mode && r.k == k && r.refinetuned == refinetuned)
    }

    pub fn full(&self) -> &VariantRow {
        &self.rows[0]
    }

    /// Tab-separated grid, one row per variant.
    pub fn to_table(&self) -> String {
        let mut s = String::from("variant\trefinetuned\tndcg@10\tparams\tquery_speedup\tdoc_speedup\n");
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.4}\t{}\t{}\t{}\n",
                r.label,
                r.refinetuned,
                r.ndcg,
                r.params,
                f(r.query_speedup),
                f(r.doc_speedup)
            ));
        }
        s
    }
}

fn suffix(mode: DropMode) -> &'static str {
    match mode {
        DropMode::AttnOnly => "A",
        DropMode::MlpOnly => "M",
        DropMode::Block | DropMode::Combined => "B",
    }
}

/// Score the base model's sublayers, then evaluate every Drop-kA / kM / kB
/// variant (removing the `k` least important) directly and, when configured,
/// after re-training.
pub fn redundancy_experiment(
    base: &EncoderModel<f32>,
    train_data: &[Triplet],
    eval: &EvalCorpus,
    calib: &CalibrationSet,
    config: &RedundancyConfig,
) -> Result<ExperimentReport> {
    ensure!(config.ndcg_k >= 1, "ndcg_k must be ≥ 1");
    let importance = score_sublayers(base, calib)?;
    let (na, nm) = (base.present_count(Group::Attn), base.present_count(Group::Mlp));
    let cfg = &base.config;
    let base_extra = base.count_params() - cfg.params_with(na, nm);

    let measure = |model: &EncoderModel<f32>, label: String, mode, k, refinetuned, expected| -> Result<VariantRow> {
        let run = brute_force_search(model, eval, config.ndcg_k)?;
        let ndcg = ndcg_at_k(&run, &eval.qrels, config.ndcg_k)?;
        let bench = match &config.bench {
            Some(w) => Some(throughput_bench(model, &label, Some(("full", base)), w)?),
            None => None,
        };
        Ok(VariantRow {
            label,
            mode,
            k,
            refinetuned,
            ndcg,
            params: model.count_params(),
            expected_params: expected,
            query_speedup: bench.as_ref().and_then(|b| b.query.speedup),
            doc_speedup: bench.as_ref().and_then(|b| b.doc.speedup),
        })
    };

    let mut rows = vec![measure(base, "Full".into(), None, 0, false, base.count_params())?];
    for &mode in &config.modes {
        for &k in &config.drop_counts {
            let (ka, km) = match mode {
                DropMode::AttnOnly => (na.checked_sub(k), Some(nm)),
                DropMode::MlpOnly => (Some(na), nm.checked_sub(k)),
                DropMode::Block | DropMode::Combined => {
                    let kb = base.n_layers().checked_sub(k);
                    (kb, kb)
                }
            };
            let (Some(ka), Some(km)) = (ka, km) else {
                return Err(crate::Error::contract(format!("cannot drop {k} sublayers in {mode:?} mode")));
            };
            let plan = plan_for_mode(&importance, mode, ka, km)?;
            let dropped = apply_drop(base, &plan)?;
            let expected = cfg.params_with(plan.retained_attn.len(), plan.retained_mlp.len()) + base_extra;
            let label = format!("Drop-{k}{}", suffix(mode));
            rows.push(measure(&dropped, label.clone(), Some(mode), k, false, expected)?);
            if let Some(tc) = &config.refinetune {
                let mut tuned = dropped;
                train(&mut tuned, train_data, tc)?;
                let expected = tuned.count_params();
                rows.push(measure(&tuned, label, Some(mode), k, true, expected)?);
            }
        }
    }
    Ok(ExperimentReport {
        heatmap: HeatMap::from_report(&importance),
        importance,
        rows,
    })
}
