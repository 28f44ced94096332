//! Finite-difference checks of gradients w.r.t. model parameters.

use crate::encoder::{EncoderModel, TrainScope};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{grad_check, relative_error, Tape, Tensor, Var};

/// Worst relative error between tape gradients and central differences for
/// every parameter `scope` trains. At most `max_coords` coordinates per tensor
/// are probed, spread evenly over the tensor.
pub fn param_grad_check<F>(model: &EncoderModel<f64>, scope: TrainScope, loss: F, h: f64, max_coords: usize) -> Result<ParamCheck>
where
    F: Fn(&EncoderModel<f64>, &mut Tape<f64>, TrainScope) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = loss(model, &mut tape, scope)?;
    tape.backward(y)?;
    let eval = |m: &EncoderModel<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let y = loss(m, &mut t, TrainScope::Frozen)?;
        Ok(t.value(y).item())
    };
    let mut report = ParamCheck::default();
    for (pi, p) in model.params().iter().enumerate() {
        if !scope.trains(p.kind) {
            continue;
        }
        let grad = tape
            .param_grad(p.tensor)
            .ok_or_else(|| Error::contract(format!("{} never reached the tape", p.name)))?;
        let n = p.tensor.numel();
        let stride = (n / max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride).take(max_coords) {
            let mut plus = model.clone();
            plus.params_mut()[pi].tensor.data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].tensor.data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            report.coords += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]", p.name);
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub coords: usize,
    pub worst: String,
}

/// Worst finite-difference error of one tape operation over many random
/// inputs.
#[derive(Clone, Debug, Default)]
pub struct OpCheck {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() * 1.6 - 0.7)
}

/// Scalar `Σ w ⊙ y` so every output coordinate reaches the gradient.
fn reduce(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = t.constant(weights(t.shape(y)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn draw(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64, signed: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if signed && rng.random_bool(0.5) {
            -v
        } else {
            v
        }
    })
}

/// One random instance of every differentiable primitive: the input, and a
/// function of it that the check differentiates.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>, OpFn)> {
    let g = |rng: &mut ChaCha8Rng, r: usize, c: usize| draw(rng, vec![r, c], -1.5, 1.5, false);
    let mut v: Vec<(&'static str, Tensor<f64>, OpFn)> = Vec::new();
    let b = g(rng, 4, 2);
    v.push(("matmul", g(rng, 3, 4), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        t.matmul(x, b)
    })));
    let a = g(rng, 2, 3);
    v.push(("matmul_rhs", g(rng, 3, 4), Box::new(move |t, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x)
    })));
    let w = g(rng, 5, 4);
    v.push(("linear", g(rng, 3, 4), Box::new(move |t, x| {
        let w = t.constant(w.clone());
        t.linear(x, w)
    })));
    let xin = g(rng, 3, 4);
    v.push(("linear_weight", g(rng, 5, 4), Box::new(move |t, w| {
        let x = t.constant(xin.clone());
        t.linear(x, w)
    })));
    v.push(("transpose", g(rng, 3, 4), Box::new(|t, x| t.transpose(x))));
    let o = g(rng, 3, 4);
    v.push(("add", g(rng, 3, 4), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        t.add(x, o)
    })));
    let o = g(rng, 3, 4);
    v.push(("sub", g(rng, 3, 4), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        t.sub(o, x)
    })));
    v.push(("mul", g(rng, 3, 4), Box::new(|t, x| t.mul(x, x))));
    let c = rng.random_range(-2.0..2.0);
    v.push(("scale", g(rng, 3, 4), Box::new(move |t, x| Ok(t.scale(x, c)))));
    v.push(("relu", draw(rng, vec![3, 4], 0.05, 2.0, true), Box::new(|t, x| Ok(t.relu(x)))));
    v.push(("abs", draw(rng, vec![3, 4], 0.05, 2.0, true), Box::new(|t, x| Ok(t.abs(x)))));
    v.push(("silu", g(rng, 3, 4), Box::new(|t, x| Ok(t.silu(x)))));
    v.push(("gelu", g(rng, 3, 4), Box::new(|t, x| Ok(t.gelu(x)))));
    v.push(("sigmoid", g(rng, 3, 4), Box::new(|t, x| Ok(t.sigmoid(x)))));
    v.push(("exp", g(rng, 3, 4), Box::new(|t, x| Ok(t.exp(x)))));
    v.push(("ln", draw(rng, vec![3, 4], 0.2, 3.0, false), Box::new(|t, x| Ok(t.ln(x)))));
    v.push(("sum", g(rng, 3, 4), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    })));
    v.push(("mean", g(rng, 3, 4), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        Ok(t.mean(y))
    })));
    v.push(("mean_rows", g(rng, 3, 4), Box::new(|t, x| t.mean_rows(x))));
    v.push(("softmax_cols", g(rng, 3, 4), Box::new(|t, x| t.softmax(x, 0))));
    v.push(("softmax_rows", g(rng, 3, 4), Box::new(|t, x| t.softmax(x, 1))));
    v.push(("log_softmax_rows", g(rng, 3, 4), Box::new(|t, x| Ok(t.log_softmax_rows(x)))));
    let gamma = draw(rng, vec![4], 0.5, 1.5, false);
    v.push(("rms_norm", g(rng, 3, 4), Box::new(move |t, x| {
        let gm = t.constant(gamma.clone());
        t.rms_norm(x, gm, 1e-6)
    })));
    let xin = g(rng, 3, 4);
    v.push(("rms_norm_gain", draw(rng, vec![4], 0.5, 1.5, false), Box::new(move |t, gm| {
        let x = t.constant(xin.clone());
        t.rms_norm(x, gm, 1e-6)
    })));
    v.push(("l2_normalize_rows", g(rng, 3, 4), Box::new(|t, x| Ok(t.l2_normalize_rows(x)))));
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    v.push(("gather_rows", g(rng, 6, 3), Box::new(move |t, x| t.gather_rows(x, &ids))));
    let rows: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    v.push(("select_rows", g(rng, 5, 3), Box::new(move |t, x| t.select_rows(x, &rows))));
    let other = g(rng, 2, 3);
    v.push(("concat_rows", g(rng, 3, 3), Box::new(move |t, x| {
        let o = t.constant(other.clone());
        let sq = t.mul(x, x)?;
        t.concat_rows(&[x, o, sq])
    })));
    let mut mask: Vec<bool> = (0..12).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    v.push(("mask_fill", g(rng, 3, 4), Box::new(move |t, x| {
        let m = t.mask_fill(x, &mask)?;
        Ok(t.log_softmax_rows(m))
    })));
    let cols: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    v.push(("pick_per_row", g(rng, 3, 4), Box::new(move |t, x| t.pick_per_row(x, &cols))));
    let (k, val) = (g(rng, 5, 4), g(rng, 5, 4));
    v.push(("attention_q", g(rng, 5, 4), Box::new(move |t, q| {
        let (k, val) = (t.constant(k.clone()), t.constant(val.clone()));
        t.attention(q, k, val, 2, true)
    })));
    let (q, val) = (g(rng, 5, 4), g(rng, 5, 4));
    v.push(("attention_k", g(rng, 5, 4), Box::new(move |t, k| {
        let (q, val) = (t.constant(q.clone()), t.constant(val.clone()));
        t.attention(q, k, val, 2, false)
    })));
    let (q, k) = (g(rng, 5, 4), g(rng, 5, 4));
    v.push(("attention_v", g(rng, 5, 4), Box::new(move |t, val| {
        let (q, k) = (t.constant(q.clone()), t.constant(k.clone()));
        t.attention(q, k, val, 2, true)
    })));
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    v.push(("infonce", g(rng, 3, 5), Box::new(move |t, x| crate::retrieval::infonce_from_logits(t, x, &targets, None))));
    let teacher = draw(rng, vec![3, 5], -2.0, 2.0, false);
    v.push(("distill_kl", g(rng, 3, 5), Box::new(move |t, x| crate::retrieval::distill_kl(t, x, &teacher, 0.7))));
    v.push(("l0_surrogate", draw(rng, vec![6], 0.05, 1.5, true), Box::new(|t, x| crate::slimming::l0_surrogate_on(t, &[x], 5.0))));
    v
}

/// Check every primitive at `points` random inputs each.
pub fn check_ops(points: usize, seed: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OpCheck> = Vec::new();
    for _ in 0..points {
        for (i, (op, x, f)) in op_cases(&mut rng).into_iter().enumerate() {
            let err = grad_check(|t, v| {
                let y = f(t, v)?;
                reduce(t, y)
            }, &x, h)?;
            if out.len() <= i {
                out.push(OpCheck { op, ..Default::default() });
            }
            out[i].points += 1;
            out[i].max_rel_err = out[i].max_rel_err.max(err);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_at_a_few_points() {
        for c in check_ops(5, 1, 1e-5).unwrap() {
            assert!(c.max_rel_err < 1e-4, "{} {}", c.op, c.max_rel_err);
        }
    }
}
