use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{EncoderConfig, Pooling};
use crate::retrieval::SyntheticTask;

fn model(seed: u64) -> EncoderModel<f32> {
    let cfg = EncoderConfig { n_layers: 3, d_model: 16, n_heads: 2, d_ff: 24, ..Default::default() };
    EncoderModel::new(cfg, seed).unwrap()
}

fn inputs(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..rng.random_range(1..12)).map(|_| rng.random_range(1..512)).collect()).collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn state(z: Vec<Option<Vec<f32>>>) -> SlimState {
    let n = z.len();
    SlimState { z, frozen: vec![false; n] }
}

#[test]
fn install_is_a_bitwise_no_op() {
    let base = model(1);
    let mut g = base.clone();
    install_gates(&mut g).unwrap();
    for x in inputs(10, 0) {
        assert_eq!(bits(&base.encode(&x).unwrap()), bits(&g.encode(&x).unwrap()));
    }
    assert_eq!(g.count_params() - base.count_params(), 3 * 24);
    assert_eq!(SlimState::of(&g).total(), 72);
    assert!(install_gates(&mut g).is_err());
    let mut none = model(1);
    for l in 0..3 {
        none.remove_sublayer(Group::Mlp, l);
    }
    assert!(install_gates(&mut none).is_err());
}

#[test]
fn surrogate_values() {
    assert_eq!(l0_surrogate(&[0.0; 4], 5.0), 2.0);
    assert!((l0_surrogate(&[1.0, 1.0], 5.0) - 1.986_614_298_151_430).abs() < 1e-12);
    assert!(l0_surrogate(&[0.0, 0.3], 5.0) < l0_surrogate(&[0.0, -0.4], 5.0));
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::vector(vec![1.0, -1.0, 0.0]));
    let r = l0_surrogate_on(&mut t, &[z], 5.0).unwrap();
    assert!((t.value(r).item() - l0_surrogate(&[1.0, -1.0, 0.0], 5.0)).abs() < 1e-15);
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let x = Tensor::vector(vec![0.7, -0.2, 1.3, 0.05]);
    let err = crate::tensor::grad_check(|t, v| l0_surrogate_on(t, &[v], 5.0), &x, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn global_prune_example() {
    let s = state(vec![Some(vec![0.9, 0.0, 0.2]), Some(vec![0.5, 0.05, 0.8])]);
    let m = global_prune(&s, 0.5).unwrap();
    assert_eq!(m.layers, vec![Some(vec![1, 0, 0]), Some(vec![1, 0, 1])]);
    let ones = global_prune(&s, 0.0).unwrap();
    assert_eq!(ones.zeros(), 0);
}

#[test]
fn negative_gates_rank_first_with_index_ties() {
    let s = state(vec![Some(vec![-0.3, 0.4]), None, Some(vec![-5.0, 0.0])]);
    let m = global_prune(&s, 0.5).unwrap();
    assert_eq!(m.layers, vec![Some(vec![0, 1]), None, Some(vec![0, 1])]);
}

#[test]
fn prune_rejects_bad_ratios_and_total_removal() {
    let s = state(vec![Some(vec![1.0])]);
    assert!(global_prune(&s, 1.0).is_err());
    assert!(global_prune(&s, 0.6).is_err());
    assert!(global_prune(&state(vec![None]), 0.3).is_err());
}

#[test]
fn all_ones_mask_and_shrink_are_identities() {
    let base = model(2);
    let mut g = base.clone();
    install_gates(&mut g).unwrap();
    let mask = PruneMask::all_ones(&g);
    apply_mask(&mut g, &mask).unwrap();
    let s = shrink(&g, &mask).unwrap();
    assert!(!s.has_gates());
    assert_eq!(s.count_params(), base.count_params());
    for x in inputs(10, 1) {
        let want = bits(&base.encode(&x).unwrap());
        assert_eq!(bits(&g.encode(&x).unwrap()), want);
        assert_eq!(bits(&s.encode(&x).unwrap()), want);
    }
}

#[test]
fn single_neuron_removal_costs_three_d() {
    let cfg = EncoderConfig { n_layers: 1, d_model: 4, n_heads: 1, d_ff: 6, ..Default::default() };
    let base = EncoderModel::<f32>::new(cfg, 0).unwrap();
    let mut mask = PruneMask::all_ones(&base);
    mask.layers[0].as_mut().unwrap()[2] = 0;
    let s = shrink(&base, &mask).unwrap();
    assert_eq!(base.count_params() - s.count_params(), 12);
    assert_eq!(s.count_params(), predicted_params(&base, &mask));
}

#[test]
fn annihilated_layer_becomes_a_dropped_mlp() {
    let base = model(3);
    let mut mask = PruneMask::all_ones(&base);
    mask.layers[1] = Some(vec![0; 24]);
    let mut masked = base.clone();
    install_gates(&mut masked).unwrap();
    apply_mask(&mut masked, &mask).unwrap();
    let s = shrink(&masked, &mask).unwrap();
    assert!(!s.has_sublayer(Group::Mlp, 1));
    let mut coarse = base.clone();
    coarse.remove_sublayer(Group::Mlp, 1);
    assert_eq!(s.count_params(), coarse.count_params());
    assert_eq!(s.count_params(), predicted_params(&base, &mask));
    for x in inputs(5, 2) {
        assert_eq!(bits(&s.encode(&x).unwrap()), bits(&coarse.encode(&x).unwrap()));
        let (a, b) = (masked.encode(&x).unwrap(), s.encode(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-6));
    }
}

#[test]
fn mismatched_mask_is_rejected() {
    let m = model(0);
    let mut mask = PruneMask::all_ones(&m);
    mask.layers[0].as_mut().unwrap().pop();
    assert!(shrink(&m, &mask).is_err());
    let mut g = m.clone();
    assert!(apply_mask(&mut g, &PruneMask { layers: vec![None] }).is_err());
    let mut bad = PruneMask::all_ones(&m);
    bad.layers[0].as_mut().unwrap()[0] = 2;
    assert!(apply_mask(&mut g, &bad).is_err());
}

fn tiny_batch() -> TripletBatch {
    let data = SyntheticTask { corpus_size: 100, train_queries: 4, eval_queries: 1, negatives: 3, ..Default::default() }
        .generate()
        .unwrap();
    TripletBatch::from_triplets(&data.train[..3]).unwrap()
}

#[test]
fn step_trains_only_gates() {
    let mut g = model(4);
    install_gates(&mut g).unwrap();
    let before = g.clone();
    let batch = tiny_batch();
    let cfg = SlimConfig { lambda: 0.1, ..Default::default() };
    let mut opt = Adam::new(cfg.lr);
    let loss = slim_train_step(&mut g, &batch, &cfg, &mut opt).unwrap();
    assert!((loss.total - loss.infonce - loss.reg).abs() < 1e-5);
    for (p, q) in g.params().iter().zip(before.params()) {
        if p.name.ends_with(".z") {
            assert!(!p.tensor.bitwise_eq(q.tensor), "{} did not move", p.name);
        } else {
            assert!(p.tensor.bitwise_eq(q.tensor), "{} moved", p.name);
        }
    }
    let mut ungated = model(4);
    assert!(slim_train_step(&mut ungated, &batch, &cfg, &mut opt).is_err());
}

#[test]
fn zero_lambda_total_is_infonce() {
    let mut g = model(5);
    install_gates(&mut g).unwrap();
    let cfg = SlimConfig { lambda: 0.0, ..Default::default() };
    let l = slim_train_step(&mut g, &tiny_batch(), &cfg, &mut Adam::new(1e-3)).unwrap();
    assert!((l.total - l.infonce).abs() < 1e-7);
    assert_eq!(l.reg, 0.0);
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut g = model(6).cast::<f64>();
    install_gates(&mut g).unwrap();
    for b in &mut g.blocks {
        let z = &mut b.mlp.as_mut().unwrap().mlp.z.as_mut().unwrap().values;
        z.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.5 + 0.05 * (i % 7) as f64);
    }
    let batch = tiny_batch();
    let cfg = SlimConfig { lambda: 0.05, tau: 0.5, ..Default::default() };
    let r = crate::verify::param_grad_check(
        &g,
        TrainScope::Gates,
        |m, t, _| Ok(slim_objective(m, t, &batch, &cfg)?.0),
        1e-5,
        60,
    )
    .unwrap();
    assert!(r.coords > 0 && r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn shrink_matches_masked_model_at_default_ratio() {
    for seed in 0..3 {
        let base = model(10 + seed);
        let mut g = base.clone();
        install_gates(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut g.blocks {
            let z = &mut b.mlp.as_mut().unwrap().mlp.z.as_mut().unwrap().values;
            z.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..1.5));
        }
        let mask = global_prune(&SlimState::of(&g), 0.30).unwrap();
        assert_eq!(mask.zeros(), (0.30f64 * 72.0).round() as usize);
        apply_mask(&mut g, &mask).unwrap();
        let s = shrink(&g, &mask).unwrap();
        assert_eq!(s.count_params(), predicted_params(&base, &mask));
        for x in inputs(100, seed) {
            let (a, b) = (g.encode(&x).unwrap(), s.encode(&x).unwrap());
            let d = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            assert!(d < 1e-6, "{d}");
        }
    }
}

#[test]
fn mask_serde_round_trip() {
    let m = PruneMask { layers: vec![Some(vec![1, 0]), None] };
    let s = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<PruneMask>(&s).unwrap(), m);
}

#[test]
fn config_validation() {
    assert!(SlimConfig::default().validate().is_ok());
    assert!(SlimConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    assert!(SlimConfig { beta: 0.0, ..Default::default() }.validate().is_err());
    assert!(SlimConfig { prune_ratio: 1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn mean_pooling_models_shrink_too() {
    let cfg = EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 10, pooling: Pooling::Mean, ..Default::default() };
    let base = EncoderModel::<f32>::new(cfg, 9).unwrap();
    let mut mask = PruneMask::all_ones(&base);
    mask.layers[0].as_mut().unwrap()[..5].fill(0);
    let s = shrink(&base, &mask).unwrap();
    assert_eq!(s.blocks[0].mlp.as_ref().unwrap().mlp.width(), 5);
}

proptest! {
    #[test]
    fn zero_count_is_exact(z in proptest::collection::vec(-2.0f32..2.0, 2..60), ratio in 0.0f64..0.9) {
        let n = z.len();
        let split = n / 2;
        let s = state(vec![Some(z[..split].to_vec()), Some(z[split..].to_vec())]);
        let want = (ratio * n as f64).round() as usize;
        match global_prune(&s, ratio) {
            Ok(m) => {
                prop_assert_eq!(m.zeros(), want);
                prop_assert_eq!(global_prune(&s, ratio).unwrap(), m);
            }
            Err(_) => prop_assert_eq!(want, n),
        }
    }

    #[test]
    fn surrogate_bounds(z in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let r = l0_surrogate(&z, 5.0);
        let n = z.len() as f64;
        prop_assert!(r >= 0.5 * n && r <= n);
    }
}
