//! Width reduction of MLP sublayers: learned per-neuron gates `z`, a sigmoid
//! sparsity surrogate, global mask selection and physical shrinking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Gate, Group, TrainScope};
use crate::error::{ensure, Error, Result};
use crate::optim::{trainable_grads, Adam};
use crate::retrieval::{batch_objective, Triplet, TripletBatch};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlimConfig {
    pub lambda: f64,
    pub beta: f64,
    pub steps: usize,
    pub prune_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub use_in_batch_negatives: bool,
    pub seed: u64,
}

impl Default for SlimConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-8,
            beta: 5.0,
            steps: 500,
            prune_ratio: 0.30,
            lr: 1e-3,
            batch_size: 8,
            tau: 0.02,
            use_in_batch_negatives: true,
            seed: 0,
        }
    }
}

impl SlimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0, "lambda must be ≥ 0, got {}", self.lambda);
        ensure!(self.beta > 0.0, "beta must be positive, got {}", self.beta);
        ensure!(
            (0.0..1.0).contains(&self.prune_ratio),
            "prune_ratio must lie in [0, 1), got {}",
            self.prune_ratio
        );
        ensure!(self.lr >= 0.0 && self.tau > 0.0, "invalid lr or tau");
        ensure!(self.batch_size >= 1, "batch_size must be ≥ 1");
        Ok(())
    }
}

/// Snapshot of every layer's gate: `None` where the MLP is absent or ungated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimState {
    pub z: Vec<Option<Vec<f32>>>,
    pub frozen: Vec<bool>,
}

impl SlimState {
    pub fn of<T: Real>(model: &EncoderModel<T>) -> Self {
        let gates: Vec<Option<&Gate<T>>> = model
            .blocks
            .iter()
            .map(|b| b.mlp.as_ref().and_then(|s| s.mlp.z.as_ref()))
            .collect();
        Self {
            z: gates
                .iter()
                .map(|g| g.map(|g| g.values.data().iter().map(|x| x.as_f64() as f32).collect()))
                .collect(),
            frozen: gates.iter().map(|g| g.is_some_and(|g| g.frozen)).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.z.iter().flatten().map(Vec::len).sum()
    }
}

/// Per-layer binary keep vector over the MLP intermediate dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: Vec<Option<Vec<u8>>>,
}

impl PruneMask {
    pub fn all_ones<T: Real>(model: &EncoderModel<T>) -> Self {
        Self {
            layers: model
                .blocks
                .iter()
                .map(|b| b.mlp.as_ref().map(|s| vec![1; s.mlp.width()]))
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }

    pub fn zeros(&self) -> usize {
        self.layers.iter().flatten().flatten().filter(|&&m| m == 0).count()
    }

    pub fn zeros_in(&self, layer: usize) -> usize {
        self.layers[layer].as_ref().map_or(0, |m| m.iter().filter(|&&x| x == 0).count())
    }

    /// Layers whose every neuron is masked.
    pub fn annihilated(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].as_ref().is_some_and(|m| m.iter().all(|&x| x == 0)))
            .collect()
    }

    fn check<T: Real>(&self, model: &EncoderModel<T>) -> Result<()> {
        ensure!(
            self.layers.len() == model.n_layers(),
            "mask covers {} layers but the model has {}",
            self.layers.len(),
            model.n_layers()
        );
        for (l, (m, b)) in self.layers.iter().zip(&model.blocks).enumerate() {
            let width = b.mlp.as_ref().map(|s| s.mlp.width());
            ensure!(
                m.as_ref().map(Vec::len) == width,
                "mask layer {l} has width {:?} but the MLP has {width:?}",
                m.as_ref().map(Vec::len)
            );
            ensure!(
                m.iter().flatten().all(|&x| x <= 1),
                "mask layer {l} holds a non-binary entry"
            );
        }
        Ok(())
    }
}

/// Σ σ(β·|z_i|).
pub fn l0_surrogate(z: &[f64], beta: f64) -> f64 {
    z.iter().map(|x| 1.0 / (1.0 + (-beta * x.abs()).exp())).sum()
}

/// Tape version of [`l0_surrogate`] summed over several gate vectors.
pub fn l0_surrogate_on<T: Real>(tape: &mut Tape<T>, zs: &[Var], beta: f64) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for &z in zs {
        let a = tape.abs(z);
        let s = tape.scale(a, T::lit(beta));
        let g = tape.sigmoid(s);
        let part = tape.sum(g);
        total = tape.add(total, part)?;
    }
    Ok(total)
}

/// Attach `z = 1ⁿ` to every present MLP.
pub fn install_gates<T: Real>(model: &mut EncoderModel<T>) -> Result<()> {
    ensure!(!model.has_gates(), "gates are already installed");
    ensure!(model.present_count(Group::Mlp) > 0, "model has no MLP sublayer to gate");
    for b in &mut model.blocks {
        if let Some(s) = &mut b.mlp {
            let n = s.mlp.width();
            s.mlp.z = Some(Gate { values: Tensor::ones(vec![n]), frozen: false });
        }
    }
    Ok(())
}

fn trainable_gates<T: Real>(model: &EncoderModel<T>) -> Vec<&Tensor<T>> {
    model
        .blocks
        .iter()
        .filter_map(|b| b.mlp.as_ref().and_then(|s| s.mlp.z.as_ref()))
        .filter(|g| !g.frozen)
        .map(|g| &g.values)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimStepLoss {
    pub step: usize,
    pub infonce: f64,
    /// `λ · R̃(ReLU(z))`
    pub reg: f64,
    pub surrogate: f64,
    pub total: f64,
}

/// InfoNCE plus `λ · R̃(ReLU(z))` on `tape`; returns `(total, infonce, surrogate)`.
pub fn slim_objective<T: Real>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    batch: &TripletBatch,
    config: &SlimConfig,
) -> Result<(Var, f64, f64)> {
    let gates = trainable_gates(model);
    ensure!(!gates.is_empty(), "no trainable gates installed");
    let obj = batch_objective(model, tape, TrainScope::Gates, batch, config.tau, config.use_in_batch_negatives, 0.0)?;
    let zs: Vec<Var> = gates
        .iter()
        .map(|z| {
            let v = tape.param(z, true);
            tape.relu(v)
        })
        .collect();
    let r = l0_surrogate_on(tape, &zs, config.beta)?;
    let surrogate = tape.value(r).item().as_f64();
    let weighted = tape.scale(r, T::lit(config.lambda));
    let total = tape.add(obj.total, weighted)?;
    Ok((total, obj.infonce, surrogate))
}

/// One Adam step on the gates only.
pub fn slim_train_step(model: &mut EncoderModel<f32>, batch: &TripletBatch, config: &SlimConfig, opt: &mut Adam) -> Result<SlimStepLoss> {
    ensure!(model.has_gates(), "slimming step requires installed gates");
    let mut tape = Tape::new();
    let (total, infonce, surrogate) = slim_objective(model, &mut tape, batch, config)?;
    let t = tape.value(total).item() as f64;
    if !t.is_finite() {
        return Err(Error::Diverged { step: opt.steps_taken(), loss: t });
    }
    tape.backward(total)?;
    let grads = trainable_grads(model, &tape, TrainScope::Gates);
    let step = opt.steps_taken();
    opt.step(model, &grads);
    Ok(SlimStepLoss { step, infonce, reg: config.lambda * surrogate, surrogate, total: t })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlimLog {
    pub steps: Vec<SlimStepLoss>,
}

/// Install gates if needed and train them for `config.steps` mini-batches,
/// cycling through reshuffled passes over `data`.
pub fn slim_train(model: &mut EncoderModel<f32>, data: &[Triplet], config: &SlimConfig) -> Result<SlimLog> {
    config.validate()?;
    ensure!(!data.is_empty(), "slimming set is empty");
    if !model.has_gates() {
        install_gates(model)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut log = SlimLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while log.steps.len() < config.steps {
        if cursor >= order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let items: Vec<Triplet> = order[cursor..end].iter().map(|&i| data[i].clone()).collect();
        cursor = end;
        let batch = TripletBatch::from_triplets(&items)?;
        log.steps.push(slim_train_step(model, &batch, config, &mut opt)?);
    }
    Ok(log)
}

/// Zero the `round(ratio · N)` globally smallest `ReLU(z)` entries, ties going
/// to the lower `(layer, neuron)`; everything else becomes 1.
pub fn global_prune(state: &SlimState, ratio: f64) -> Result<PruneMask> {
    ensure!((0.0..1.0).contains(&ratio), "prune ratio must lie in [0, 1), got {ratio}");
    let mut entries: Vec<(f32, usize, usize)> = Vec::with_capacity(state.total());
    for (l, z) in state.z.iter().enumerate() {
        for (i, &v) in z.iter().flatten().enumerate() {
            let v = if v.is_nan() { 0.0 } else { v.max(0.0) };
            entries.push((v, l, i));
        }
    }
    ensure!(!entries.is_empty(), "no gates to prune");
    let n = entries.len();
    let zeros = (ratio * n as f64).round() as usize;
    ensure!(zeros < n, "ratio {ratio} would remove all {n} gated neurons");
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut layers: Vec<Option<Vec<u8>>> = state.z.iter().map(|z| z.as_ref().map(|z| vec![1; z.len()])).collect();
    for &(_, l, i) in &entries[..zeros] {
        layers[l].as_mut().expect("entry from a gated layer")[i] = 0;
    }
    Ok(PruneMask { layers })
}

/// Freeze every gate to the mask.
pub fn apply_mask<T: Real>(model: &mut EncoderModel<T>, mask: &PruneMask) -> Result<()> {
    mask.check(model)?;
    for (b, m) in model.blocks.iter_mut().zip(&mask.layers) {
        if let (Some(s), Some(m)) = (&mut b.mlp, m) {
            s.mlp.z = Some(Gate {
                values: Tensor::new(vec![m.len()], m.iter().map(|&x| T::lit(x as f64)).collect())?,
                frozen: true,
            });
        }
    }
    Ok(())
}

/// Physically delete masked neurons and remove `z`. A layer with no
/// surviving neuron loses its MLP sublayer.
pub fn shrink<T: Real>(model: &EncoderModel<T>, mask: &PruneMask) -> Result<EncoderModel<T>> {
    mask.check(model)?;
    let mut out = model.clone();
    for l in 0..out.n_layers() {
        let Some(m) = &mask.layers[l] else { continue };
        let keep: Vec<usize> = (0..m.len()).filter(|&i| m[i] == 1).collect();
        if keep.is_empty() {
            out.remove_sublayer(Group::Mlp, l);
            continue;
        }
        let mlp = &mut out.blocks[l].mlp.as_mut().expect("checked against mask").mlp;
        if keep.len() == m.len() {
            mlp.z = None;
        } else {
            mlp.keep_neurons(&keep);
        }
    }
    Ok(out)
}

/// Parameter count [`shrink`] will produce: every masked neuron takes its
/// gate row, up row and down column (`3d`), a fully masked layer also takes
/// its pre-norm, and gate vectors disappear. Assumes no adapters on the MLP.
pub fn predicted_params<T: Real>(model: &EncoderModel<T>, mask: &PruneMask) -> usize {
    let d = model.d_model();
    let gates = SlimState::of(model).total();
    model.count_params() - gates - 3 * d * mask.zeros() - d * mask.annihilated().len()
}

#[cfg(test)]
mod tests;
