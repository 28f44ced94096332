//! Sublayer importance on a calibration set and coarse-grained dropping.
//!
//! A sublayer's score is `1 − cos(x_in, x_out)` between the residual stream
//! entering its slot and leaving it, computed per token position and averaged
//! over positions, then over samples. Low scores mark sublayers that barely
//! move the stream.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Group, TrainScope};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tape, Tensor};

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 256;
pub const DEFAULT_CALIBRATION_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, seed: u64) -> Result<Self> {
        ensure!(!sequences.is_empty(), "calibration set is empty");
        ensure!(
            sequences.iter().all(|s| !s.is_empty()),
            "calibration set contains an empty sequence"
        );
        Ok(Self { sequences, seed })
    }

    /// Task-independent mode: uniform random non-`<eos>` tokens.
    pub fn random_tokens(vocab_size: usize, samples: usize, len: usize, seed: u64) -> Result<Self> {
        ensure!(vocab_size >= 2, "vocab too small for calibration");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..samples)
            .map(|_| (0..len).map(|_| rng.random_range(1..vocab_size as u32)).collect())
            .collect();
        Self::new(seqs, seed)
    }

    /// Default mode: corpus-like sequences from the synthetic task generator.
    pub fn from_task(task: &crate::retrieval::SyntheticTask, samples: usize, len: usize, seed: u64) -> Result<Self> {
        Self::new(task.calibration_sequences(samples, len, seed)?, seed)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub aggregation: String,
    pub samples: usize,
    pub skipped_positions: usize,
    pub calibration_seed: u64,
    pub model_fingerprint: String,
}

/// Per-layer scores for both groups. Dropped sublayers score 0 and are
/// flagged absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
    pub present_attn: Vec<bool>,
    pub present_mlp: Vec<bool>,
    pub meta: ReportMeta,
}

impl ImportanceReport {
    pub fn n_layers(&self) -> usize {
        self.attn.len()
    }

    pub fn scores(&self, group: Group) -> &[f64] {
        match group {
            Group::Attn => &self.attn,
            Group::Mlp => &self.mlp,
        }
    }

    pub fn present(&self, group: Group) -> &[bool] {
        match group {
            Group::Attn => &self.present_attn,
            Group::Mlp => &self.present_mlp,
        }
    }

    /// Sublayer entries in slot order (attention then MLP per block).
    pub fn entries(&self) -> Vec<(Group, usize, f64, bool)> {
        (0..self.n_layers())
            .flat_map(|l| {
                [
                    (Group::Attn, l, self.attn[l], self.present_attn[l]),
                    (Group::Mlp, l, self.mlp[l], self.present_mlp[l]),
                ]
            })
            .collect()
    }
}

fn cosine_distance(x: &[f64], y: &[f64]) -> Option<f64> {
    if x == y {
        return (x.iter().any(|&v| v != 0.0)).then_some(0.0);
    }
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    let cos = (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0);
    Some(1.0 - cos)
}

/// Sum of per-position `1 − cos` over rows, the number of rows scored and the
/// number skipped for a zero norm.
pub fn position_distances<T: Real>(before: &Tensor<T>, after: &Tensor<T>) -> (f64, usize, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0, 0);
    for r in 0..before.rows() {
        let x: Vec<f64> = before.row(r).iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = after.row(r).iter().map(|v| v.as_f64()).collect();
        match cosine_distance(&x, &y) {
            Some(d) => {
                sum += d;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    (sum, n, skipped)
}

/// Score every present sublayer of `model` on `calib`.
pub fn score_sublayers<T: Real>(model: &EncoderModel<T>, calib: &CalibrationSet) -> Result<ImportanceReport> {
    let layers = model.n_layers();
    ensure!(layers >= 1, "model has no blocks");
    ensure!(!calib.is_empty(), "calibration set is empty");
    let slots = 2 * layers;
    let present: Vec<bool> = (0..slots)
        .map(|s| model.has_sublayer(if s % 2 == 0 { Group::Attn } else { Group::Mlp }, s / 2))
        .collect();

    // per sample: (per-slot position-mean or None, skipped count)
    let per_sample: Vec<Result<(Vec<Option<f64>>, usize)>> = calib
        .sequences
        .par_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let states = model.hidden_states(&mut tape, TrainScope::Frozen, seq)?;
            let mut out = vec![None; slots];
            let mut skipped = 0;
            for s in 0..slots {
                if !present[s] {
                    continue;
                }
                let (sum, n, sk) = position_distances(tape.value(states[s]), tape.value(states[s + 1]));
                skipped += sk;
                if n > 0 {
                    out[s] = Some(sum / n as f64);
                }
            }
            Ok((out, skipped))
        })
        .collect();

    let mut sums = vec![0.0; slots];
    let mut counts = vec![0usize; slots];
    let mut skipped = 0;
    for r in per_sample {
        let (scores, sk) = r?;
        skipped += sk;
        for (s, v) in scores.into_iter().enumerate() {
            if let Some(v) = v {
                sums[s] += v;
                counts[s] += 1;
            }
        }
    }
    let mut attn = vec![0.0; layers];
    let mut mlp = vec![0.0; layers];
    for s in 0..slots {
        if !present[s] {
            continue;
        }
        if counts[s] == 0 {
            return Err(Error::Numeric(format!(
                "every position of sublayer slot {s} had a zero-norm hidden state"
            )));
        }
        let v = (sums[s] / counts[s] as f64).clamp(0.0, 2.0);
        if s % 2 == 0 {
            attn[s / 2] = v;
        } else {
            mlp[s / 2] = v;
        }
    }
    Ok(ImportanceReport {
        attn,
        mlp,
        present_attn: (0..layers).map(|l| present[2 * l]).collect(),
        present_mlp: (0..layers).map(|l| present[2 * l + 1]).collect(),
        meta: ReportMeta {
            aggregation: "per-position 1-cos, mean over positions then samples".into(),
            samples: calib.len(),
            skipped_positions: skipped,
            calibration_seed: calib.seed,
            model_fingerprint: model.fingerprint(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropMode {
    AttnOnly,
    MlpOnly,
    Block,
    Combined,
}

impl std::str::FromStr for DropMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn-only" | "attn" => Ok(DropMode::AttnOnly),
            "mlp-only" | "mlp" => Ok(DropMode::MlpOnly),
            "block" => Ok(DropMode::Block),
            "combined" => Ok(DropMode::Combined),
            other => Err(Error::Config(format!(
                "unknown drop mode `{other}` (attn-only, mlp-only, block, combined)"
            ))),
        }
    }
}

/// Retained attention and MLP layer sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub mode: DropMode,
    pub n_layers: usize,
    pub k_attn: usize,
    pub k_mlp: usize,
    pub retained_attn: BTreeSet<usize>,
    pub retained_mlp: BTreeSet<usize>,
}

impl PruningPlan {
    /// Keeps every present sublayer of `report`.
    pub fn keep_all(report: &ImportanceReport) -> Self {
        let all = |p: &[bool]| p.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect::<BTreeSet<_>>();
        let (a, m) = (all(&report.present_attn), all(&report.present_mlp));
        Self {
            mode: DropMode::Combined,
            n_layers: report.n_layers(),
            k_attn: a.len(),
            k_mlp: m.len(),
            retained_attn: a,
            retained_mlp: m,
        }
    }

    pub fn dropped(&self, group: Group, present: &[bool]) -> Vec<usize> {
        let kept = match group {
            Group::Attn => &self.retained_attn,
            Group::Mlp => &self.retained_mlp,
        };
        (0..self.n_layers).filter(|l| present[*l] && !kept.contains(l)).collect()
    }
}

/// Top-`k` indices of `scores` among `present`; ties keep the lower index.
fn top_k(scores: &[f64], present: &[bool], k: usize, what: &str) -> Result<BTreeSet<usize>> {
    ensure!(k <= scores.len(), "k_{what} = {k} exceeds the {} layers", scores.len());
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| present[i]).collect();
    ensure!(
        k <= cand.len(),
        "k_{what} = {k} but only {} {what} sublayers are present",
        cand.len()
    );
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(cand.into_iter().take(k).collect())
}

/// Retain the `k_attn` most important attention layers and the `k_mlp` most
/// important MLP layers.
pub fn select_retained(report: &ImportanceReport, k_attn: usize, k_mlp: usize) -> Result<PruningPlan> {
    Ok(PruningPlan {
        mode: DropMode::Combined,
        n_layers: report.n_layers(),
        k_attn,
        k_mlp,
        retained_attn: top_k(&report.attn, &report.present_attn, k_attn, "attn")?,
        retained_mlp: top_k(&report.mlp, &report.present_mlp, k_mlp, "mlp")?,
    })
}

/// Mean of a block's two sublayer scores (absent sublayers count as 0).
pub fn block_scores(report: &ImportanceReport) -> Vec<f64> {
    report.attn.iter().zip(&report.mlp).map(|(a, m)| 0.5 * (a + m)).collect()
}

/// Retain the `k` most important blocks; the rest lose both sublayers.
pub fn select_blocks(report: &ImportanceReport, k: usize) -> Result<PruningPlan> {
    let nonempty: Vec<bool> = (0..report.n_layers())
        .map(|l| report.present_attn[l] || report.present_mlp[l])
        .collect();
    let blocks = top_k(&block_scores(report), &nonempty, k, "blocks")?;
    let retained_attn: BTreeSet<usize> = blocks.iter().copied().filter(|&l| report.present_attn[l]).collect();
    let retained_mlp: BTreeSet<usize> = blocks.iter().copied().filter(|&l| report.present_mlp[l]).collect();
    Ok(PruningPlan {
        mode: DropMode::Block,
        n_layers: report.n_layers(),
        k_attn: retained_attn.len(),
        k_mlp: retained_mlp.len(),
        retained_attn,
        retained_mlp,
    })
}

/// Build a plan for `mode`. Groups a mode does not touch keep every present
/// sublayer; block mode requires `k_attn == k_mlp` (the block count).
pub fn plan_for_mode(report: &ImportanceReport, mode: DropMode, k_attn: usize, k_mlp: usize) -> Result<PruningPlan> {
    let present = |p: &[bool]| p.iter().filter(|&&x| x).count();
    let mut plan = match mode {
        DropMode::Combined => select_retained(report, k_attn, k_mlp)?,
        DropMode::AttnOnly => select_retained(report, k_attn, present(&report.present_mlp))?,
        DropMode::MlpOnly => select_retained(report, present(&report.present_attn), k_mlp)?,
        DropMode::Block => {
            ensure!(k_attn == k_mlp, "block mode takes one block count, got k_attn={k_attn} k_mlp={k_mlp}");
            return select_blocks(report, k_attn);
        }
    };
    plan.mode = mode;
    Ok(plan)
}

/// Remove every present sublayer the plan does not retain.
pub fn apply_drop<T: Real>(model: &EncoderModel<T>, plan: &PruningPlan) -> Result<EncoderModel<T>> {
    ensure!(
        plan.n_layers == model.n_layers(),
        "plan is for {} layers but the model has {}",
        plan.n_layers,
        model.n_layers()
    );
    for (group, set) in [(Group::Attn, &plan.retained_attn), (Group::Mlp, &plan.retained_mlp)] {
        if let Some(&l) = set.iter().find(|&&l| !model.has_sublayer(group, l)) {
            return Err(Error::contract(format!(
                "plan retains {} layer {l}, which is not present",
                group.name()
            )));
        }
    }
    let mut out = model.clone();
    for l in 0..model.n_layers() {
        if !plan.retained_attn.contains(&l) {
            out.remove_sublayer(Group::Attn, l);
        }
        if !plan.retained_mlp.contains(&l) {
            out.remove_sublayer(Group::Mlp, l);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderEntry {
    pub group: Group,
    pub layer: usize,
    pub score: f64,
    pub present: bool,
}

/// Sublayers by ascending importance within each group (stable, so ties keep
/// layer order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropOrder {
    pub attn: Vec<OrderEntry>,
    pub mlp: Vec<OrderEntry>,
}

impl DropOrder {
    pub fn from_report(report: &ImportanceReport) -> Self {
        let order = |group: Group| {
            let mut v: Vec<OrderEntry> = (0..report.n_layers())
                .map(|layer| OrderEntry {
                    group,
                    layer,
                    score: report.scores(group)[layer],
                    present: report.present(group)[layer],
                })
                .collect();
            v.sort_by(|a, b| a.score.total_cmp(&b.score));
            v
        };
        Self {
            attn: order(Group::Attn),
            mlp: order(Group::Mlp),
        }
    }

    pub fn group(&self, group: Group) -> &[OrderEntry] {
        match group {
            Group::Attn => &self.attn,
            Group::Mlp => &self.mlp,
        }
    }

    /// `group,drop_rank,layer,score,present` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,drop_rank,layer,score,present\n");
        for g in [Group::Attn, Group::Mlp] {
            for (rank, e) in self.group(g).iter().enumerate() {
                s.push_str(&format!("{},{},{},{:.9},{}\n", g.name(), rank, e.layer, e.score, e.present));
            }
        }
        s
    }
}

pub fn drop_order_trace<T: Real>(model: &EncoderModel<T>, calib: &CalibrationSet) -> Result<DropOrder> {
    Ok(DropOrder::from_report(&score_sublayers(model, calib)?))
}

#[cfg(test)]
mod tests;
