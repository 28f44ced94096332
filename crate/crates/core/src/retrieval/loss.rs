use crate::error::{ensure, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Mean cross-entropy of `logits` rows against `targets`. Entries where
/// `mask` is true are excluded from the softmax.
pub fn infonce_from_logits<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    ensure!(shape.len() == 2 && shape[0] > 0, "logits must be a non-empty [B, C] matrix, got {shape:?}");
    ensure!(targets.len() == shape[0], "{} targets for {} rows", targets.len(), shape[0]);
    if let Some(m) = mask {
        for (i, &t) in targets.iter().enumerate() {
            ensure!(t < shape[1] && !m[i * shape[1] + t], "target of row {i} is masked or out of range");
        }
    }
    let masked = match mask {
        Some(m) if m.iter().any(|&b| b) => tape.mask_fill(logits, m)?,
        _ => logits,
    };
    let logp = tape.log_softmax_rows(masked);
    let picked = tape.pick_per_row(logp, targets)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, T::lit(-1.0)))
}

/// Contrastive loss for `b` queries, their positives and `k` negatives each
/// (`negs` rows grouped per query). With `in_batch` every other item's
/// positive and negatives also act as negatives.
pub fn infonce_loss<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    pos: Var,
    negs: Option<Var>,
    in_batch: bool,
    tau: f64,
) -> Result<Var> {
    ensure!(tau > 0.0, "temperature must be positive, got {tau}");
    let (qs, ps) = (tape.shape(q).to_vec(), tape.shape(pos).to_vec());
    ensure!(qs.len() == 2 && qs == ps, "query/positive shapes differ: {qs:?} vs {ps:?}");
    let b = qs[0];
    let mut cands = vec![pos];
    let mut k = 0;
    if let Some(n) = negs {
        let ns = tape.shape(n).to_vec();
        ensure!(ns.len() == 2 && ns[1] == qs[1], "negative dimension {ns:?} does not match queries {qs:?}");
        ensure!(ns[0] % b == 0, "{} negatives do not split evenly over {b} queries", ns[0]);
        k = ns[0] / b;
        cands.push(n);
    }
    let c = tape.concat_rows(&cands)?;
    let sims = tape.linear(q, c)?;
    let logits = tape.scale(sims, T::lit(1.0 / tau));
    let cols = b * (1 + k);
    let mask: Vec<bool> = if in_batch {
        vec![false; b * cols]
    } else {
        (0..b)
            .flat_map(|i| (0..cols).map(move |j| !(j == i || (j >= b && (j - b) / k.max(1) == i && k > 0))))
            .collect()
    };
    let targets: Vec<usize> = (0..b).collect();
    infonce_from_logits(tape, logits, &targets, Some(&mask))
}

/// Row-wise softmax of `x / tau` in f64.
pub fn softmax_t(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let e: Vec<f64> = x.iter().map(|v| (v / tau - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `mean_rows KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn distill_kl<T: Real>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<f64>, tau: f64) -> Result<Var> {
    ensure!(tau > 0.0, "temperature must be positive, got {tau}");
    let s = tape.shape(student).to_vec();
    ensure!(s == teacher.shape(), "student scores {s:?} vs teacher {:?}", teacher.shape());
    ensure!(s.len() == 2 && s[0] > 0 && s[1] > 0, "scores must be a non-empty matrix");
    let (b, m) = (s[0], s[1]);
    let mut p = Vec::with_capacity(b * m);
    let mut entropy_term = 0.0;
    for r in 0..b {
        for pi in softmax_t(teacher.row(r), tau) {
            if pi > 0.0 {
                entropy_term += pi * pi.ln();
            }
            p.push(pi);
        }
    }
    let scaled = tape.scale(student, T::lit(1.0 / tau));
    let logq = tape.log_softmax_rows(scaled);
    let pv = tape.constant(Tensor::new(vec![b, m], p.into_iter().map(T::lit).collect())?);
    let cross = tape.mul(pv, logq)?;
    let cross = tape.sum(cross);
    let c = tape.constant(Tensor::scalar(T::lit(entropy_term)));
    let kl = tape.sub(c, cross)?;
    Ok(tape.scale(kl, T::lit(1.0 / b as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let n = rows[0].len();
        let r = rows.len();
        let data = rows
            .into_iter()
            .flat_map(|v| {
                let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(move |x| x / s)
            })
            .collect();
        Tensor::new(vec![r, n], data).unwrap()
    }

    #[test]
    fn uniform_logits_over_eight_give_ln8() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::zeros(vec![1, 8]));
        let loss = infonce_from_logits(&mut t, l, &[0], None).unwrap();
        assert!((t.value(loss).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn temperature_matches_prescaled_logits() {
        let q = unit_rows(vec![vec![1.0, 0.2, -0.3]]);
        let c = unit_rows(vec![vec![0.9, 0.1, 0.0], vec![-0.2, 1.0, 0.5], vec![0.3, -0.4, 1.0]]);
        let tau = 0.05;
        let mut t = Tape::<f64>::new();
        let (qv, pv) = (t.constant(q.clone()), t.constant(c.select_rows(&[0])));
        let nv = t.constant(c.select_rows(&[1, 2]));
        let a = infonce_loss(&mut t, qv, pv, Some(nv), true, tau).unwrap();
        let mut logits = Vec::new();
        for r in 0..3 {
            logits.push(crate::tensor::dot(q.row(0), c.row(r)) / tau);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        assert!((t.value(a).item() - (lse - logits[0])).abs() < 1e-9);
    }

    #[test]
    fn single_item_batch_ignores_in_batch_flag() {
        let q = unit_rows(vec![vec![1.0, 0.5]]);
        let p = unit_rows(vec![vec![0.8, 0.6]]);
        let n = unit_rows(vec![vec![-1.0, 0.1], vec![0.2, 1.0]]);
        let run = |ib| {
            let mut t = Tape::<f32>::new();
            let (a, b, c) = (t.constant(q.cast()), t.constant(p.cast()), t.constant(n.cast()));
            let l = infonce_loss(&mut t, a, b, Some(c), ib, 0.02).unwrap();
            t.value(l).item()
        };
        assert_eq!(run(true).to_bits(), run(false).to_bits());
    }

    #[test]
    fn in_batch_negatives_only_add_candidates() {
        let q = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = unit_rows(vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        let n = unit_rows(vec![vec![0.5, 0.5], vec![0.6, 0.4]]);
        let run = |ib| {
            let mut t = Tape::<f64>::new();
            let (a, b, c) = (t.constant(q.clone()), t.constant(p.clone()), t.constant(n.clone()));
            let l = infonce_loss(&mut t, a, b, Some(c), ib, 0.1).unwrap();
            t.value(l).item()
        };
        assert!(run(true) > run(false));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::zeros(vec![1, 3]));
        let p = t.constant(Tensor::zeros(vec![1, 3]));
        let n = t.constant(Tensor::zeros(vec![1, 4]));
        assert!(infonce_loss(&mut t, q, p, Some(n), true, 0.02).is_err());
        assert!(infonce_loss(&mut t, q, p, None, true, 0.0).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let s = Tensor::matrix(2, 3, vec![0.3, -0.1, 0.7, 0.0, 0.2, 0.2]).unwrap();
        let mut t = Tape::<f64>::new();
        let v = t.constant(s.clone());
        let kl = distill_kl(&mut t, v, &s, 0.02).unwrap();
        assert!(t.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn one_hot_teacher_against_uniform_student_gives_ln_m() {
        let m = 5;
        let teacher = Tensor::new(vec![1, m], (0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::zeros(vec![1, m]));
        // tiny tau turns the teacher into a numerically exact one-hot
        let kl = distill_kl(&mut t, v, &teacher, 1e-4).unwrap();
        assert!((t.value(kl).item() - (m as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let teacher = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.5]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.4, -0.2]).unwrap();
        let err = crate::tensor::grad_check(|t, v| distill_kl(t, v, &teacher, 0.5), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = crate::tensor::grad_check(|t, v| infonce_from_logits(t, v, &[2], None), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
