//! Adam with optional linear warm-up.

use std::collections::HashMap;

use crate::encoder::{EncoderModel, TrainScope};
use crate::tensor::{Real, Tape, Tensor};

/// Gradients of every parameter trained under `scope` that took part in the
/// last backward pass on `tape`.
pub fn trainable_grads<T: Real>(model: &EncoderModel<T>, tape: &Tape<T>, scope: TrainScope) -> Vec<(String, Tensor<T>)> {
    model
        .params()
        .into_iter()
        .filter(|p| scope.trains(p.kind))
        .filter_map(|p| tape.param_grad(p.tensor).map(|g| (p.name, g)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update to the named parameters of `model`.
    pub fn step<T: Real>(&mut self, model: &mut EncoderModel<T>, grads: &[(String, Tensor<T>)]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let by_name: HashMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for p in model.params_mut() {
            let Some(g) = by_name.get(p.name.as_str()) else { continue };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn warmup_ramps_linearly() {
        let mut a = Adam::new(1.0).with_warmup(10);
        assert!((a.current_lr() - 0.1).abs() < 1e-12);
        let mut m = EncoderModel::<f32>::new(EncoderConfig { n_layers: 1, vocab_size: 4, d_model: 4, n_heads: 1, d_ff: 4, max_seq_len: 4, ..Default::default() }, 0).unwrap();
        for _ in 0..12 {
            a.step(&mut m, &[]);
        }
        assert_eq!(a.current_lr(), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = EncoderModel::<f64>::new(EncoderConfig { n_layers: 1, vocab_size: 4, d_model: 4, n_heads: 1, d_ff: 4, max_seq_len: 4, ..Default::default() }, 0).unwrap();
        let before = m.tok_emb.data()[0];
        let g = Tensor::from_fn(m.tok_emb.shape().to_vec(), |i| if i == 0 { 3.0 } else { 0.0 });
        Adam::new(0.01).step(&mut m, &[("tok_emb".into(), g)]);
        assert!((m.tok_emb.data()[0] - (before - 0.01)).abs() < 1e-9);
        assert_eq!(m.tok_emb.data()[1..], EncoderModel::<f64>::new(m.config.clone(), 0).unwrap().tok_emb.data()[1..]);
    }
}
