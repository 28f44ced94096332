use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel, ParamKind};
use crate::tensor::Real;

/// Parameter totals of a concrete model, by role.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub norms: usize,
    pub attention: usize,
    pub mlp: usize,
    pub gates: usize,
    pub lora: usize,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn of<T: Real>(model: &EncoderModel<T>) -> Self {
        let mut b = Self::default();
        for p in model.params() {
            let n = p.tensor.numel();
            match p.kind {
                ParamKind::Embedding => b.embedding += n,
                ParamKind::Norm => b.norms += n,
                ParamKind::Gate | ParamKind::Mask => b.gates += n,
                ParamKind::LoraA | ParamKind::LoraB => b.lora += n,
                ParamKind::Weight if p.name.contains(".attn.") => b.attention += n,
                ParamKind::Weight => b.mlp += n,
            }
            b.total += n;
        }
        b
    }
}

impl EncoderConfig {
    /// Four `d × d` projections plus the pre-norm gain.
    pub fn attn_sublayer_params(&self) -> usize {
        4 * self.d_model * self.d_model + self.d_model
    }

    /// Gate, up and down projections of width `d_ff` plus the pre-norm gain.
    pub fn mlp_sublayer_params(&self) -> usize {
        3 * self.d_model * self.d_ff + self.d_model
    }

    pub fn embedding_params(&self) -> usize {
        (self.vocab_size + self.max_seq_len + 1) * self.d_model
    }

    /// Parameters of a model keeping `attn` attention and `mlp` MLP sublayers.
    pub fn params_with(&self, attn: usize, mlp: usize) -> usize {
        self.embedding_params() + attn * self.attn_sublayer_params() + mlp * self.mlp_sublayer_params()
    }
}

/// Closed-form parameter count of a decoder-style backbone, for checking
/// published model shapes without materialising them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchShape {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Width of the key/value projections (`d_model` without grouped queries).
    pub kv_dim: usize,
    /// Rows of a learned position table (0 for rotary backbones).
    pub positions: usize,
    pub final_norm: bool,
    pub lm_head: bool,
}

impl ArchShape {
    /// Mistral-7B: hidden 4096, intermediate 14336, 32 layers, 8 KV heads.
    pub fn mistral_7b() -> Self {
        Self {
            vocab_size: 32_000,
            d_model: 4096,
            d_ff: 14_336,
            n_layers: 32,
            kv_dim: 1024,
            positions: 0,
            final_norm: true,
            lm_head: true,
        }
    }

    pub fn mlp_per_layer(&self) -> usize {
        3 * self.d_model * self.d_ff
    }

    pub fn attention_per_layer(&self) -> usize {
        2 * self.d_model * self.d_model + 2 * self.d_model * self.kv_dim
    }

    pub fn embedding(&self) -> usize {
        (self.vocab_size + self.positions) * self.d_model
    }

    pub fn total(&self) -> usize {
        let per_layer = self.mlp_per_layer() + self.attention_per_layer() + 2 * self.d_model;
        let head = if self.lm_head { self.vocab_size * self.d_model } else { 0 };
        let final_norm = if self.final_norm { self.d_model } else { 0 };
        self.embedding() + self.n_layers * per_layer + final_norm + head
    }

    pub fn mlp_fraction(&self) -> f64 {
        (self.n_layers * self.mlp_per_layer()) as f64 / self.total() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mistral_mlp_share() {
        let with_head = ArchShape::mistral_7b();
        assert!((with_head.mlp_fraction() - 0.778).abs() < 5e-4, "{}", with_head.mlp_fraction());
        let without = ArchShape {
            lm_head: false,
            ..ArchShape::mistral_7b()
        };
        assert!((without.mlp_fraction() - 0.7928).abs() < 5e-4, "{}", without.mlp_fraction());
    }
}
