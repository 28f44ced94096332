use super::*;
use crate::encoder::{Activation, EncoderConfig, Pooling};
use proptest::prelude::*;

fn cfg(d_ff: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        d_ff,
        max_seq_len: 16,
        pooling: Pooling::LastToken,
        activation: Activation::Silu,
        norm_eps: 1e-6,
    }
}

fn report(attn: Vec<f64>, mlp: Vec<f64>) -> ImportanceReport {
    let n = attn.len();
    ImportanceReport {
        present_attn: vec![true; n],
        present_mlp: vec![true; mlp.len()],
        attn,
        mlp,
        meta: ReportMeta {
            aggregation: String::new(),
            samples: 1,
            skipped_positions: 0,
            calibration_seed: 0,
            model_fingerprint: String::new(),
        },
    }
}

fn t(rows: usize, d: Vec<f64>) -> Tensor<f64> {
    let c = d.len() / rows;
    Tensor::matrix(rows, c, d).unwrap()
}

#[test]
fn hand_evaluated_distances() {
    assert_eq!(position_distances(&t(1, vec![1., 0.]), &t(1, vec![0., 1.])).0, 1.0);
    let (s, n, _) = position_distances(&t(1, vec![1., 0.]), &t(1, vec![1., 1.]));
    assert_eq!(n, 1);
    assert!((s - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
    assert!((s - 0.29289).abs() < 1e-5);
    assert_eq!(position_distances(&t(1, vec![0.3, -2.]), &t(1, vec![0.3, -2.])).0, 0.0);
    let (_, n, skipped) = position_distances(&t(2, vec![0., 0., 1., 1.]), &t(2, vec![1., 0., 2., 2.]));
    assert_eq!((n, skipped), (1, 1));
}

#[test]
fn zero_function_sublayer_scores_exactly_zero_and_leads_drop_order() {
    let mut m = EncoderModel::<f32>::new(cfg(12), 4).unwrap();
    let s = m.blocks[2].mlp.as_mut().unwrap();
    s.mlp.down.weight = Tensor::zeros(s.mlp.down.weight.shape().to_vec());
    let calib = CalibrationSet::random_tokens(32, 6, 10, 1).unwrap();
    let r = score_sublayers(&m, &calib).unwrap();
    assert_eq!(r.mlp[2], 0.0);
    assert!(r.entries().iter().all(|(_, _, s, _)| (0.0..=2.0).contains(s)));
    let order = drop_order_trace(&m, &calib).unwrap();
    assert_eq!(order.mlp[0].layer, 2);
    assert_eq!(r.meta.samples, 6);
}

#[test]
fn dropped_sublayers_score_zero_and_are_flagged() {
    let mut m = EncoderModel::<f32>::new(cfg(12), 4).unwrap();
    m.remove_sublayer(Group::Mlp, 1);
    let calib = CalibrationSet::random_tokens(32, 3, 5, 2).unwrap();
    let r = score_sublayers(&m, &calib).unwrap();
    assert_eq!(r.mlp[1], 0.0);
    assert!(!r.present_mlp[1]);
    assert_eq!(r.entries().len(), 8);
    // cannot retain it, nor ask for more MLPs than are present
    assert!(select_retained(&r, 4, 3).is_ok());
    assert!(select_retained(&r, 4, 4).is_err());
    assert!(!select_retained(&r, 4, 3).unwrap().retained_mlp.contains(&1));
}

#[test]
fn selection_examples() {
    let r = report(vec![0.3, 0.3, 0.1, 0.2], vec![0.05, 0.40, 0.35, 0.10]);
    let p = select_retained(&r, 1, 2).unwrap();
    assert_eq!(p.retained_mlp, [1, 2].into_iter().collect());
    assert_eq!(p.retained_attn, [0].into_iter().collect());
    let all = select_retained(&r, 4, 4).unwrap();
    assert_eq!(all.retained_attn.len(), 4);
    assert!(matches!(select_retained(&r, 5, 1), Err(Error::Contract(_))));
    assert_eq!(select_retained(&r, 2, 2).unwrap(), select_retained(&r, 2, 2).unwrap());
}

#[test]
fn block_mode_uses_mean_of_sublayer_scores() {
    let r = report(vec![0.3, 0.1, 0.5], vec![0.1, 0.2, 0.0]);
    // block scores 0.2, 0.15, 0.25
    let p = select_blocks(&r, 2).unwrap();
    assert_eq!(p.retained_attn, [0, 2].into_iter().collect());
    assert_eq!(p.retained_mlp, [0, 2].into_iter().collect());
    assert!(plan_for_mode(&r, DropMode::Block, 2, 1).is_err());
    let p = plan_for_mode(&r, DropMode::MlpOnly, 0, 1).unwrap();
    assert_eq!(p.retained_attn.len(), 3);
    assert_eq!(p.retained_mlp, [1].into_iter().collect());
}

#[test]
fn apply_drop_accounting_and_equivalence() {
    let m = EncoderModel::<f32>::new(cfg(32), 8).unwrap();
    let calib = CalibrationSet::random_tokens(32, 4, 8, 3).unwrap();
    let r = score_sublayers(&m, &calib).unwrap();

    let keep = select_retained(&r, 4, 4).unwrap();
    let same = apply_drop(&m, &keep).unwrap();
    assert_eq!(same, m);

    let plan = select_retained(&r, 4, 3).unwrap();
    let dropped = apply_drop(&m, &plan).unwrap();
    assert_eq!(m.count_params() - dropped.count_params(), 768 + 8);
    let gone = plan.dropped(Group::Mlp, &r.present_mlp)[0];
    let mut zeroed = m.clone();
    let s = zeroed.blocks[gone].mlp.as_mut().unwrap();
    s.mlp.down.weight = Tensor::zeros(s.mlp.down.weight.shape().to_vec());
    for seq in &calib.sequences {
        let a = dropped.encode(seq).unwrap();
        let b = zeroed.encode(seq).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut wrong = plan.clone();
    wrong.n_layers = 3;
    assert!(apply_drop(&m, &wrong).is_err());
}

#[test]
fn tied_scores_keep_layer_order() {
    let r = report(vec![0.2, 0.2, 0.2], vec![0.5, 0.1, 0.1]);
    let o = DropOrder::from_report(&r);
    assert_eq!(o.attn.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(o.mlp.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![1, 2, 0]);
    assert!(o.to_csv().lines().count() == 7);
}

#[test]
fn empty_calibration_is_rejected() {
    assert!(CalibrationSet::new(vec![], 0).is_err());
    assert!(CalibrationSet::new(vec![vec![]], 0).is_err());
}

proptest! {
    #[test]
    fn distance_is_bounded_and_scale_invariant(
        xs in proptest::collection::vec(-5.0f64..5.0, 12),
        ys in proptest::collection::vec(-5.0f64..5.0, 12),
        c in 0.01f64..100.0,
    ) {
        let (a, b) = (t(3, xs.clone()), t(3, ys.clone()));
        let (s, n, _) = position_distances(&a, &b);
        prop_assume!(n == 3);
        prop_assert!((0.0..=6.0).contains(&s));
        let scale = |v: &Vec<f64>| t(3, v.iter().map(|x| x * c).collect());
        let (s2, _, _) = position_distances(&scale(&xs), &scale(&ys));
        prop_assert!((s - s2).abs() < 1e-9);
    }

    #[test]
    fn selection_is_idempotent(scores in proptest::collection::vec(0.0f64..2.0, 6), k in 0usize..=6) {
        let r = report(scores.clone(), scores);
        let p = select_retained(&r, k, k).unwrap();
        prop_assert_eq!(p.retained_attn.len(), k);
        let mut sub = r.clone();
        for l in 0..6 {
            sub.present_attn[l] = p.retained_attn.contains(&l);
            sub.present_mlp[l] = p.retained_mlp.contains(&l);
        }
        let again = select_retained(&sub, k, k).unwrap();
        prop_assert_eq!(again.retained_attn, p.retained_attn);
    }
}
