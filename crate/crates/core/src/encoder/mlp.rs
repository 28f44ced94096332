use super::linear::Linear;
use super::{Activation, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Per-neuron scaling vector `z` on the intermediate dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T = f32> {
    pub values: Tensor<T>,
    /// Frozen gates hold a binary mask and never receive updates.
    pub frozen: bool,
}

/// `W_down(ReLU(z) ⊙ Act(W_gate x) ⊙ (W_up x))`, with `z` only while slimming.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedMlp<T = f32> {
    /// `[n, d]`
    pub gate: Linear<T>,
    /// `[n, d]`
    pub up: Linear<T>,
    /// `[d, n]`
    pub down: Linear<T>,
    pub z: Option<Gate<T>>,
    pub activation: Activation,
}

impl<T: Real> GatedMlp<T> {
    pub fn new(gate: Linear<T>, up: Linear<T>, down: Linear<T>, activation: Activation) -> Result<Self> {
        let n = gate.out_dim();
        if up.out_dim() != n || down.in_dim() != n || gate.in_dim() != up.in_dim() || down.out_dim() != gate.in_dim() {
            return Err(Error::Shape {
                op: "gated_mlp",
                lhs: gate.weight.shape().to_vec(),
                rhs: down.weight.shape().to_vec(),
            });
        }
        Ok(Self {
            gate,
            up,
            down,
            z: None,
            activation,
        })
    }

    /// Intermediate width `n`.
    pub fn width(&self) -> usize {
        self.gate.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.gate.in_dim()
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params()
            + self.up.num_params()
            + self.down.num_params()
            + self.z.as_ref().map_or(0, |z| z.values.numel())
    }

    /// The branch `F(x)` without the residual.
    pub fn branch(&self, tape: &mut Tape<T>, trains: impl Fn(ParamKind) -> bool + Copy, x: Var) -> Result<Var> {
        let g = self.gate.forward(tape, trains, x)?;
        let mut a = match self.activation {
            Activation::Silu => tape.silu(g),
            Activation::Gelu => tape.gelu(g),
            Activation::Relu => tape.relu(g),
        };
        if let Some(z) = &self.z {
            if z.values.numel() != self.width() {
                return Err(Error::contract(format!(
                    "gate length {} does not match intermediate width {}",
                    z.values.numel(),
                    self.width()
                )));
            }
            let kind = if z.frozen { ParamKind::Mask } else { ParamKind::Gate };
            let zv = tape.param(&z.values, trains(kind));
            let rz = tape.relu(zv);
            a = tape.mul(a, rz)?;
        }
        let u = self.up.forward(tape, trains, x)?;
        let h = tape.mul(a, u)?;
        self.down.forward(tape, trains, h)
    }

    /// `F(x) + x`.
    pub fn forward(&self, tape: &mut Tape<T>, trains: impl Fn(ParamKind) -> bool + Copy, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.hidden()) {
            return Err(Error::Shape {
                op: "gated_mlp_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.hidden()],
            });
        }
        let f = self.branch(tape, trains, x)?;
        tape.add(f, x)
    }

    pub fn cast<U: Real>(&self) -> GatedMlp<U> {
        GatedMlp {
            gate: self.gate.cast(),
            up: self.up.cast(),
            down: self.down.cast(),
            z: self.z.as_ref().map(|z| Gate {
                values: z.values.cast(),
                frozen: z.frozen,
            }),
            activation: self.activation,
        }
    }

    /// Physically keep only the listed intermediate neurons and drop `z`.
    pub(crate) fn keep_neurons(&mut self, keep: &[usize]) {
        self.gate.keep_outputs(keep);
        self.up.keep_outputs(keep);
        self.down.keep_inputs(keep);
        self.z = None;
    }
}

/// Convenience wrapper: run one MLP with the residual on a fresh inference tape.
pub fn gated_mlp_forward<T: Real>(mlp: &GatedMlp<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, |_| false, xv)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye_mlp(act: Activation) -> GatedMlp<f64> {
        let i = || Linear::new(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        GatedMlp::new(i(), i(), i(), act).unwrap()
    }

    #[test]
    fn hand_evaluated_identity_mlp() {
        let mlp = eye_mlp(Activation::Relu);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let y = gated_mlp_forward(&mlp, &x).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn all_ones_gate_is_bitwise_noop_and_zero_gate_is_residual() {
        let mut mlp = eye_mlp(Activation::Silu);
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let base = gated_mlp_forward(&mlp, &x).unwrap();
        mlp.z = Some(Gate {
            values: Tensor::ones(vec![2]),
            frozen: false,
        });
        assert!(gated_mlp_forward(&mlp, &x).unwrap().bitwise_eq(&base));
        mlp.z = Some(Gate {
            values: Tensor::zeros(vec![2]),
            frozen: true,
        });
        assert_eq!(gated_mlp_forward(&mlp, &x).unwrap().data(), x.data());
    }

    #[test]
    fn wrong_gate_length_is_rejected() {
        let mut mlp = eye_mlp(Activation::Silu);
        mlp.z = Some(Gate {
            values: Tensor::ones(vec![3]),
            frozen: false,
        });
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(gated_mlp_forward(&mlp, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let a = Linear::new(Tensor::<f64>::zeros(vec![3, 2]));
        let b = Linear::new(Tensor::<f64>::zeros(vec![2, 2]));
        let c = Linear::new(Tensor::<f64>::zeros(vec![2, 3]));
        assert!(GatedMlp::new(a, b, c, Activation::Silu).is_err());
    }
}
