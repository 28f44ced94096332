use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{distill_kl, infonce_loss};
use super::{Triplet, TripletBatch};
use crate::encoder::{EncoderModel, Proj, TrainScope};
use crate::error::{ensure, Error, Result};
use crate::optim::{trainable_grads, Adam};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: Proj::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub use_in_batch_negatives: bool,
    pub distill_weight: f64,
    pub warmup_steps: usize,
    /// Use at most this many explicit negatives per query.
    pub negatives: Option<usize>,
    pub max_steps: Option<usize>,
    pub lora: Option<LoraSettings>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            lr: 1e-4,
            epochs: 1,
            batch_size: 8,
            use_in_batch_negatives: true,
            distill_weight: 1.0,
            warmup_steps: 10,
            negatives: None,
            max_steps: None,
            lora: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for training a small encoder from random initialisation.
    pub fn desk_base() -> Self {
        Self { lr: 1e-3, epochs: 2, ..Self::default() }
    }

    /// Settings for re-training a pruned desk model.
    pub fn desk_retrain() -> Self {
        Self { lr: 1e-3, epochs: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, "tau must be positive, got {}", self.tau);
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be ≥ 0, got {}", self.lr);
        ensure!(self.batch_size >= 1, "batch_size must be ≥ 1");
        ensure!(self.distill_weight >= 0.0, "distill_weight must be ≥ 0");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub infonce: f64,
    pub distill: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }

    /// Mean total loss over the first and last `n` steps.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        if self.steps.is_empty() {
            return None;
        }
        let n = n.clamp(1, self.steps.len());
        let mean = |s: &[StepLoss]| s.iter().map(|x| x.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..n]), mean(&self.steps[self.steps.len() - n..])))
    }
}

pub struct BatchObjective {
    pub total: Var,
    pub infonce: f64,
    pub distill: f64,
}

fn encode_all<T: Real>(model: &EncoderModel<T>, tape: &mut Tape<T>, scope: TrainScope, seqs: &[Vec<u32>]) -> Result<Var> {
    let rows = seqs
        .iter()
        .map(|s| model.encode_on(tape, scope, s))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// InfoNCE plus weighted distillation for one batch, recorded on `tape`.
pub fn batch_objective<T: Real>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    scope: TrainScope,
    batch: &TripletBatch,
    tau: f64,
    in_batch: bool,
    distill_weight: f64,
) -> Result<BatchObjective> {
    ensure!(!batch.is_empty(), "empty batch");
    let b = batch.len();
    let q = encode_all(model, tape, scope, &batch.queries)?;
    let p = encode_all(model, tape, scope, &batch.positives)?;
    let n = if batch.k > 0 { Some(encode_all(model, tape, scope, &batch.negatives)?) } else { None };
    let nce = infonce_loss(tape, q, p, n, in_batch, tau)?;
    let infonce = tape.value(nce).item().as_f64();
    let (Some(teacher), true) = (&batch.teacher_scores, distill_weight > 0.0) else {
        return Ok(BatchObjective { total: nce, infonce, distill: 0.0 });
    };
    let cands = match n {
        Some(n) => tape.concat_rows(&[p, n])?,
        None => p,
    };
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let qi = tape.select_rows(q, &[i])?;
        let idx: Vec<usize> = std::iter::once(i).chain((0..batch.k).map(|j| b + i * batch.k + j)).collect();
        let ci = tape.select_rows(cands, &idx)?;
        rows.push(tape.linear(qi, ci)?);
    }
    let student = tape.concat_rows(&rows)?;
    let t = Tensor::new(
        vec![b, 1 + batch.k],
        teacher.iter().flatten().map(|&x| x as f64).collect(),
    )?;
    let kl = distill_kl(tape, student, &t, tau)?;
    let distill = tape.value(kl).item().as_f64();
    let weighted = tape.scale(kl, T::lit(distill_weight));
    let total = tape.add(nce, weighted)?;
    Ok(BatchObjective { total, infonce, distill })
}

fn truncate_negatives(items: &[Triplet], k: Option<usize>) -> Vec<Triplet> {
    items
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if let Some(k) = k {
                t.negatives.truncate(k);
                if let Some(s) = &mut t.teacher_scores {
                    s.truncate(1 + k);
                }
            }
            t
        })
        .collect()
}

/// Train with Adam over `epochs` passes of shuffled mini-batches. With LoRA
/// settings only the adapters move (attached here if missing); otherwise all
/// dense weights, embeddings and norms train. A frozen gate mask never trains.
pub fn train(model: &mut EncoderModel<f32>, data: &[Triplet], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    ensure!(!data.is_empty(), "training set is empty");
    let scope = match &config.lora {
        Some(l) => {
            if !model.has_lora() {
                model.attach_lora(&l.targets, l.rank, l.alpha, config.seed ^ 0x4c6f_5241)?;
            }
            TrainScope::Lora
        }
        None => TrainScope::Dense,
    };
    let items = truncate_negatives(data, config.negatives);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr).with_warmup(config.warmup_steps);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| log.steps.len() >= m) {
                break 'epochs;
            }
            let picked: Vec<Triplet> = chunk.iter().map(|&i| items[i].clone()).collect();
            let batch = TripletBatch::from_triplets(&picked)?;
            let mut tape = Tape::new();
            let obj = batch_objective(
                model,
                &mut tape,
                scope,
                &batch,
                config.tau,
                config.use_in_batch_negatives,
                config.distill_weight,
            )?;
            let total = tape.value(obj.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged { step: log.steps.len(), loss: total });
            }
            tape.backward(obj.total)?;
            let grads = trainable_grads(model, &tape, scope);
            let lr = opt.current_lr();
            opt.step(model, &grads);
            log.steps.push(StepLoss { step: log.steps.len(), total, infonce: obj.infonce, distill: obj.distill, lr });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::retrieval::SyntheticTask;

    fn tiny() -> EncoderModel<f32> {
        EncoderModel::new(EncoderConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, ..Default::default() }, 3).unwrap()
    }

    fn data() -> Vec<Triplet> {
        SyntheticTask { corpus_size: 200, train_queries: 24, eval_queries: 1, ..Default::default() }
            .generate()
            .unwrap()
            .train
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let mut m = tiny();
        let before = m.clone();
        let cfg = TrainConfig { lr: 0.0, max_steps: Some(2), ..Default::default() };
        let log = train(&mut m, &data(), &cfg).unwrap();
        assert_eq!(log.steps.len(), 2);
        assert_eq!(m.fingerprint(), before.fingerprint());
    }

    #[test]
    fn identical_seeds_identical_weights() {
        let cfg = TrainConfig { lr: 1e-3, max_steps: Some(3), ..Default::default() };
        let (mut a, mut b) = (tiny(), tiny());
        let la = train(&mut a, &data(), &cfg).unwrap();
        let lb = train(&mut b, &data(), &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(la, lb);
        assert_ne!(a.fingerprint(), tiny().fingerprint());
    }

    #[test]
    fn lora_training_freezes_base_weights() {
        let mut m = tiny();
        let base = m.clone();
        let cfg = TrainConfig { lr: 1e-2, max_steps: Some(2), lora: Some(LoraSettings::default()), ..Default::default() };
        train(&mut m, &data(), &cfg).unwrap();
        for (p, q) in m.params().iter().filter(|p| !p.name.contains("lora")).zip(base.params()) {
            assert_eq!(p.name, q.name);
            assert!(p.tensor.bitwise_eq(q.tensor), "{} moved", p.name);
        }
        assert!(m.params().iter().any(|p| p.name.ends_with("lora_b") && p.tensor.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny();
        m.tok_emb.data_mut()[0] = f32::NAN;
        let mut d = data();
        d.iter_mut().for_each(|t| t.query[0] = 1);
        match train(&mut m, &d, &TrainConfig { max_steps: Some(1), ..Default::default() }) {
            Err(Error::Diverged { step: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let m = tiny().cast::<f64>();
        let batch = TripletBatch::from_triplets(&data()[..2]).unwrap();
        for scope in [TrainScope::Dense] {
            let r = crate::verify::param_grad_check(
                &m,
                scope,
                |model, tape, scope| Ok(batch_objective(model, tape, scope, &batch, 0.5, true, 1.0)?.total),
                1e-5,
                40,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
