//! Causal transformer encoder with droppable sublayers.
//!
//! Each block holds an optional attention sublayer and an optional gated MLP,
//! both pre-norm and both wrapped in a residual. Removing a sublayer removes
//! its norm too, and the residual slot becomes an exact passthrough.

mod accounting;
mod attention;
mod linear;
mod mlp;
pub mod tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use accounting::{ArchShape, ParamBreakdown};
pub use attention::AttentionSublayer;
pub use linear::{Linear, LoraAdapter, Proj};
pub use mlp::{gated_mlp_forward, Gate, GatedMlp};
pub use tokenizer::{format_tokens, parse_tokens};

/// Reserved vocabulary id appended to every input.
pub const EOS: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    LastToken,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest accepted input, not counting the appended `<eos>`.
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-6
}

impl Default for EncoderConfig {
    /// The 8-layer desk model.
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 32,
            n_layers: 8,
            n_heads: 4,
            d_ff: 96,
            max_seq_len: 64,
            pooling: Pooling::LastToken,
            activation: Activation::Silu,
            norm_eps: default_eps(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab needs <eos> plus at least one token".into()));
        }
        Ok(())
    }
}

/// What a parameter is, for deciding which ones a phase trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Norm,
    Weight,
    /// Trainable slimming gate `z`.
    Gate,
    /// Frozen binary mask held in a gate slot.
    Mask,
    LoraA,
    LoraB,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    Frozen,
    /// Embeddings, norms and projection weights.
    Dense,
    Lora,
    Gates,
}

impl TrainScope {
    pub fn trains(self, kind: ParamKind) -> bool {
        match self {
            TrainScope::Frozen => false,
            TrainScope::Dense => matches!(kind, ParamKind::Embedding | ParamKind::Norm | ParamKind::Weight),
            TrainScope::Lora => matches!(kind, ParamKind::LoraA | ParamKind::LoraB),
            TrainScope::Gates => kind == ParamKind::Gate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnSlot<T = f32> {
    pub norm: Tensor<T>,
    pub attn: AttentionSublayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSlot<T = f32> {
    pub norm: Tensor<T>,
    pub mlp: GatedMlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T = f32> {
    pub attn: Option<AttnSlot<T>>,
    pub mlp: Option<MlpSlot<T>>,
}

/// Group of a sublayer inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Attn,
    Mlp,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Attn => "attn",
            Group::Mlp => "mlp",
        }
    }
}

/// A parameter tensor with its checkpoint name.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor<T>,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T = f32> {
    pub config: EncoderConfig,
    /// `[vocab, d]`
    pub tok_emb: Tensor<T>,
    /// `[max_seq_len + 1, d]`
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

impl<T: Real> EncoderModel<T> {
    /// Randomly initialised model.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let n = config.d_ff;
        let normal = |std: f64, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
        };
        let tok_emb = normal(1.0, vec![config.vocab_size, d], &mut rng);
        let pos_emb = normal(0.5, vec![config.max_seq_len + 1, d], &mut rng);
        let in_std = 1.0 / (d as f64).sqrt();
        let depth = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = AttentionSublayer::new(
                Linear::random(d, d, in_std, &mut rng),
                Linear::random(d, d, in_std, &mut rng),
                Linear::random(d, d, in_std, &mut rng),
                Linear::random(d, d, in_std * depth, &mut rng),
                config.n_heads,
                true,
            )?;
            let mlp = GatedMlp::new(
                Linear::random(n, d, in_std, &mut rng),
                Linear::random(n, d, in_std, &mut rng),
                Linear::random(d, n, depth / (n as f64).sqrt(), &mut rng),
                config.activation,
            )?;
            blocks.push(EncoderBlock {
                attn: Some(AttnSlot {
                    norm: Tensor::ones(vec![d]),
                    attn,
                }),
                mlp: Some(MlpSlot {
                    norm: Tensor::ones(vec![d]),
                    mlp,
                }),
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn has_sublayer(&self, group: Group, layer: usize) -> bool {
        self.blocks.get(layer).is_some_and(|b| match group {
            Group::Attn => b.attn.is_some(),
            Group::Mlp => b.mlp.is_some(),
        })
    }

    pub fn present_count(&self, group: Group) -> usize {
        (0..self.n_layers()).filter(|&l| self.has_sublayer(group, l)).count()
    }

    pub fn remove_sublayer(&mut self, group: Group, layer: usize) {
        if let Some(b) = self.blocks.get_mut(layer) {
            match group {
                Group::Attn => b.attn = None,
                Group::Mlp => b.mlp = None,
            }
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        ensure!(!ids.is_empty(), "cannot encode an empty sequence");
        ensure!(
            ids.len() <= self.config.max_seq_len,
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            self.config.max_seq_len
        );
        if let Some(&bad) = ids.iter().find(|&&t| t == EOS || t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "unknown token id {bad} (vocab {}, id {EOS} is reserved for <eos>)",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Residual stream at every sublayer boundary: `2L + 1` states, state
    /// `2l` entering block `l`'s attention slot and `2l + 1` entering its MLP
    /// slot. `<eos>` is appended to `ids`.
    pub fn hidden_states(&self, tape: &mut Tape<T>, scope: TrainScope, ids: &[u32]) -> Result<Vec<Var>> {
        self.check_ids(ids)?;
        let trains = move |k: ParamKind| scope.trains(k);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).chain([EOS as usize]).collect();
        let tok = tape.param(&self.tok_emb, trains(ParamKind::Embedding));
        let mut x = tape.gather_rows(tok, &idx)?;
        let mut states = Vec::with_capacity(2 * self.n_layers() + 1);
        states.push(x);
        let mut pos = None;
        let eps = T::lit(self.config.norm_eps);
        for block in &self.blocks {
            if let Some(slot) = &block.attn {
                let p = match pos {
                    Some(p) => p,
                    None => {
                        let table = tape.param(&self.pos_emb, trains(ParamKind::Embedding));
                        let rows: Vec<usize> = (0..idx.len()).collect();
                        let p = tape.gather_rows(table, &rows)?;
                        pos = Some(p);
                        p
                    }
                };
                let g = tape.param(&slot.norm, trains(ParamKind::Norm));
                let h = tape.rms_norm(x, g, eps)?;
                let f = slot.attn.branch(tape, trains, h, p)?;
                x = tape.add(x, f)?;
            }
            states.push(x);
            if let Some(slot) = &block.mlp {
                let g = tape.param(&slot.norm, trains(ParamKind::Norm));
                let h = tape.rms_norm(x, g, eps)?;
                let f = slot.mlp.branch(tape, trains, h)?;
                x = tape.add(x, f)?;
            }
            states.push(x);
        }
        Ok(states)
    }

    /// Pool a `[t, d]` state and L2-normalise it to a `[1, d]` embedding.
    pub fn pool(&self, tape: &mut Tape<T>, state: Var) -> Result<Var> {
        let pooled = match self.config.pooling {
            Pooling::LastToken => {
                let t = tape.value(state).rows();
                tape.select_rows(state, &[t - 1])?
            }
            Pooling::Mean => tape.mean_rows(state)?,
        };
        Ok(tape.l2_normalize_rows(pooled))
    }

    /// Embedding of `ids` on an existing tape.
    pub fn encode_on(&self, tape: &mut Tape<T>, scope: TrainScope, ids: &[u32]) -> Result<Var> {
        let states = self.hidden_states(tape, scope, ids)?;
        let last = *states.last().expect("at least the embedding state");
        self.pool(tape, last)
    }

    /// Unit-norm embedding of `ids` (`<eos>` appended).
    pub fn encode(&self, ids: &[u32]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let e = self.encode_on(&mut tape, TrainScope::Frozen, ids)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, kind, tensor| out.push(ParamRef { name, kind, tensor });
        push("tok_emb".into(), ParamKind::Embedding, &self.tok_emb);
        push("pos_emb".into(), ParamKind::Embedding, &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(s) = &b.attn {
                push(format!("blocks.{l}.attn.norm"), ParamKind::Norm, &s.norm);
                for (p, lin) in [(Proj::Q, &s.attn.q), (Proj::K, &s.attn.k), (Proj::V, &s.attn.v), (Proj::O, &s.attn.o)] {
                    linear_refs(&mut push, format!("blocks.{l}.attn.{}", p.name()), lin);
                }
            }
            if let Some(s) = &b.mlp {
                push(format!("blocks.{l}.mlp.norm"), ParamKind::Norm, &s.norm);
                for (p, lin) in [(Proj::Gate, &s.mlp.gate), (Proj::Up, &s.mlp.up), (Proj::Down, &s.mlp.down)] {
                    linear_refs(&mut push, format!("blocks.{l}.mlp.{}", p.name()), lin);
                }
                if let Some(z) = &s.mlp.z {
                    let kind = if z.frozen { ParamKind::Mask } else { ParamKind::Gate };
                    push(format!("blocks.{l}.mlp.z"), kind, &z.values);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, kind, tensor| out.push(ParamMut { name, kind, tensor });
        push("tok_emb".into(), ParamKind::Embedding, &mut self.tok_emb);
        push("pos_emb".into(), ParamKind::Embedding, &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            if let Some(s) = &mut b.attn {
                push(format!("blocks.{l}.attn.norm"), ParamKind::Norm, &mut s.norm);
                let a = &mut s.attn;
                for (p, lin) in [(Proj::Q, &mut a.q), (Proj::K, &mut a.k), (Proj::V, &mut a.v), (Proj::O, &mut a.o)] {
                    linear_muts(&mut push, format!("blocks.{l}.attn.{}", p.name()), lin);
                }
            }
            if let Some(s) = &mut b.mlp {
                push(format!("blocks.{l}.mlp.norm"), ParamKind::Norm, &mut s.norm);
                let m = &mut s.mlp;
                for (p, lin) in [(Proj::Gate, &mut m.gate), (Proj::Up, &mut m.up), (Proj::Down, &mut m.down)] {
                    linear_muts(&mut push, format!("blocks.{l}.mlp.{}", p.name()), lin);
                }
                if let Some(z) = &mut m.z {
                    let kind = if z.frozen { ParamKind::Mask } else { ParamKind::Gate };
                    push(format!("blocks.{l}.mlp.z"), kind, &mut z.values);
                }
            }
        }
        out
    }

    /// Parameters excluding any language-model head (there is none).
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        ParamBreakdown::of(self)
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    attn: b.attn.as_ref().map(|s| AttnSlot {
                        norm: s.norm.cast(),
                        attn: s.attn.cast(),
                    }),
                    mlp: b.mlp.as_ref().map(|s| MlpSlot {
                        norm: s.norm.cast(),
                        mlp: s.mlp.cast(),
                    }),
                })
                .collect(),
        }
    }

    fn linears_mut(&mut self, target: Proj) -> Vec<&mut Linear<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if target.is_attention() {
                if let Some(s) = &mut b.attn {
                    out.push(match target {
                        Proj::Q => &mut s.attn.q,
                        Proj::K => &mut s.attn.k,
                        Proj::V => &mut s.attn.v,
                        _ => &mut s.attn.o,
                    });
                }
            } else if let Some(s) = &mut b.mlp {
                out.push(match target {
                    Proj::Gate => &mut s.mlp.gate,
                    Proj::Up => &mut s.mlp.up,
                    _ => &mut s.mlp.down,
                });
            }
        }
        out
    }

    /// Attach zero-initialised adapters (`B = 0`) to every present projection
    /// of the listed kinds.
    pub fn attach_lora(&mut self, targets: &[Proj], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        ensure!(rank >= 1, "LoRA rank must be at least 1");
        ensure!(!targets.is_empty(), "no LoRA targets given");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted = targets.to_vec();
        sorted.sort();
        sorted.dedup();
        ensure!(sorted.len() == targets.len(), "duplicate LoRA target in {targets:?}");
        for &t in &sorted {
            let lins = self.linears_mut(t);
            ensure!(!lins.is_empty(), "no present `{}` projection to adapt", t.name());
            if lins.iter().any(|l| l.lora.is_some()) {
                return Err(Error::contract(format!("`{}` already carries an adapter", t.name())));
            }
        }
        for &t in &sorted {
            for lin in self.linears_mut(t) {
                lin.attach(rank, alpha, &mut rng)?;
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.params().iter().any(|p| matches!(p.kind, ParamKind::LoraA | ParamKind::LoraB))
    }

    /// Fold every adapter into its base weight and remove it.
    pub fn merge_lora(&mut self) {
        for t in Proj::ALL {
            for lin in self.linears_mut(t) {
                lin.merge();
            }
        }
    }

    pub fn has_gates(&self) -> bool {
        self.blocks.iter().any(|b| b.mlp.as_ref().is_some_and(|s| s.mlp.z.is_some()))
    }
}

fn linear_refs<'a, T: Real>(push: &mut impl FnMut(String, ParamKind, &'a Tensor<T>), base: String, lin: &'a Linear<T>) {
    push(format!("{base}.weight"), ParamKind::Weight, &lin.weight);
    if let Some(l) = &lin.lora {
        push(format!("{base}.lora_a"), ParamKind::LoraA, &l.a);
        push(format!("{base}.lora_b"), ParamKind::LoraB, &l.b);
    }
}

fn linear_muts<'a, T: Real>(push: &mut impl FnMut(String, ParamKind, &'a mut Tensor<T>), base: String, lin: &'a mut Linear<T>) {
    push(format!("{base}.weight"), ParamKind::Weight, &mut lin.weight);
    if let Some(l) = &mut lin.lora {
        push(format!("{base}.lora_a"), ParamKind::LoraA, &mut l.a);
        push(format!("{base}.lora_b"), ParamKind::LoraB, &mut l.b);
    }
}

#[cfg(test)]
mod tests;

impl<T: Real> EncoderModel<T> {
    /// SHA-256 over configuration, parameter names, shapes and 32-bit values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for p in self.params() {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_le_f32_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
