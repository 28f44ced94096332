use super::linear::Linear;
use super::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Multi-head self-attention. Position embeddings enter through the query
/// and key inputs only, so token order is visible to attention and nowhere
/// else in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSublayer<T = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub n_heads: usize,
    pub causal: bool,
}

impl<T: Real> AttentionSublayer<T> {
    pub fn new(q: Linear<T>, k: Linear<T>, v: Linear<T>, o: Linear<T>, n_heads: usize, causal: bool) -> Result<Self> {
        let d = q.out_dim();
        for l in [&q, &k, &v, &o] {
            if l.out_dim() != d || l.in_dim() != d {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: q.weight.shape().to_vec(),
                    rhs: l.weight.shape().to_vec(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::contract(format!("d_model {d} not divisible by {n_heads} heads")));
        }
        Ok(Self { q, k, v, o, n_heads, causal })
    }

    pub fn head_dim(&self) -> usize {
        self.q.out_dim() / self.n_heads
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }

    /// Branch output for normalised input `h: [t, d]` and positions `pos: [t, d]`.
    pub fn branch(&self, tape: &mut Tape<T>, trains: impl Fn(ParamKind) -> bool + Copy, h: Var, pos: Var) -> Result<Var> {
        let qk_in = tape.add(h, pos)?;
        let q = self.q.forward(tape, trains, qk_in)?;
        let k = self.k.forward(tape, trains, qk_in)?;
        let v = self.v.forward(tape, trains, h)?;
        let a = tape.attention(q, k, v, self.n_heads, self.causal)?;
        self.o.forward(tape, trains, a)
    }

    pub fn cast<U: Real>(&self) -> AttentionSublayer<U> {
        AttentionSublayer {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            n_heads: self.n_heads,
            causal: self.causal,
        }
    }
}
