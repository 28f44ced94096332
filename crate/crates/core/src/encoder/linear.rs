use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which projection of a block an adapter targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches("_proj");
        Proj::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection `{s}`")))
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Proj::Q | Proj::K | Proj::V | Proj::O)
    }
}

/// Low-rank update: effective weight `W + (alpha / rank) · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    /// `[rank, in]`
    pub a: Tensor<T>,
    /// `[out, rank]`
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn scaling(&self) -> T {
        T::lit(self.alpha / self.rank as f64)
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(alpha / rank) · B · A` as an `[out, in]` matrix.
    pub fn delta(&self) -> Vec<T> {
        let (out, r, inp) = (self.b.rows(), self.rank, self.a.cols());
        let s = self.scaling();
        let mut d = vec![T::zero(); out * inp];
        for i in 0..out {
            for p in 0..r {
                let bv = self.b.data()[i * r + p] * s;
                for j in 0..inp {
                    d[i * inp + j] += bv * self.a.data()[p * inp + j];
                }
            }
        }
        d
    }
}

/// A projection `y = x · Wᵀ` with `W: [out, in]` and an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Tensor<T>) -> Self {
        Self { weight, lora: None }
    }

    pub(crate) fn random(out: usize, inp: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = Tensor::from_fn(vec![out, inp], |_| {
            T::lit(std * rng.sample::<f64, _>(StandardNormal))
        });
        Self::new(w)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.lora.as_ref().map_or(0, |l| l.num_params())
    }

    pub fn forward(&self, tape: &mut Tape<T>, trains: impl Fn(ParamKind) -> bool, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight, trains(ParamKind::Weight));
        let y = tape.linear(x, w)?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let a = tape.param(&l.a, trains(ParamKind::LoraA));
                let b = tape.param(&l.b, trains(ParamKind::LoraB));
                let xa = tape.linear(x, a)?;
                let xab = tape.linear(xa, b)?;
                let scaled = tape.scale(xab, l.scaling());
                tape.add(y, scaled)
            }
        }
    }

    pub(crate) fn attach(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::contract("adapter already attached to this projection"));
        }
        let (out, inp) = (self.out_dim(), self.in_dim());
        let std = 1.0 / (inp as f64).sqrt();
        let a = Tensor::from_fn(vec![rank, inp], |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)));
        self.lora = Some(LoraAdapter {
            a,
            b: Tensor::zeros(vec![out, rank]),
            rank,
            alpha,
        });
        Ok(())
    }

    pub(crate) fn merge(&mut self) {
        if let Some(l) = self.lora.take() {
            let delta = l.delta();
            for (w, d) in self.weight.data_mut().iter_mut().zip(delta) {
                *w += d;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            lora: self.lora.as_ref().map(|l| LoraAdapter {
                a: l.a.cast(),
                b: l.b.cast(),
                rank: l.rank,
                alpha: l.alpha,
            }),
        }
    }

    /// Keep only the listed output rows (adapter `B` rows follow).
    pub(crate) fn keep_outputs(&mut self, rows: &[usize]) {
        self.weight = self.weight.select_rows(rows);
        if let Some(l) = &mut self.lora {
            l.b = l.b.select_rows(rows);
        }
    }

    /// Keep only the listed input columns (adapter `A` columns follow).
    pub(crate) fn keep_inputs(&mut self, cols: &[usize]) {
        self.weight = self.weight.select_cols(cols);
        if let Some(l) = &mut self.lora {
            l.a = l.a.select_cols(cols);
        }
    }
}
