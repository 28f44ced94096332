use super::*;
use crate::verify::param_grad_check;

fn tiny(pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
        pooling,
        activation: Activation::Silu,
        norm_eps: 1e-6,
    }
}

fn norm_of(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let m = EncoderModel::<f32>::new(tiny(Pooling::LastToken), 3).unwrap();
    let a = m.encode(&[3, 5, 7]).unwrap();
    let b = m.encode(&[3, 5, 7]).unwrap();
    assert!((norm_of(&a) - 1.0).abs() < 1e-6);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn invalid_inputs_are_contract_errors() {
    let m = EncoderModel::<f32>::new(tiny(Pooling::Mean), 3).unwrap();
    assert!(matches!(m.encode(&[]), Err(Error::Contract(_))));
    assert!(matches!(m.encode(&[16]), Err(Error::Contract(_))));
    assert!(matches!(m.encode(&[EOS]), Err(Error::Contract(_))));
    assert!(matches!(m.encode(&[1; 9]), Err(Error::Contract(_))));
    assert!(m.encode(&[1; 8]).is_ok());
}

#[test]
fn fully_dropped_mean_pooling_is_normalised_mean_embedding() {
    let mut m = EncoderModel::<f64>::new(tiny(Pooling::Mean), 1).unwrap();
    for l in 0..2 {
        m.remove_sublayer(Group::Attn, l);
        m.remove_sublayer(Group::Mlp, l);
    }
    let ids = [2u32, 9, 4];
    let e = m.encode(&ids).unwrap();
    let d = 8;
    let mut mean = vec![0.0; d];
    for &t in ids.iter().chain([&EOS]) {
        for j in 0..d {
            mean[j] += m.tok_emb.row(t as usize)[j] / 4.0;
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    for j in 0..d {
        assert!((e[j] - mean[j] / n).abs() < 1e-12);
    }
}

#[test]
fn causal_positions_ignore_later_tokens() {
    let m = EncoderModel::<f64>::new(tiny(Pooling::LastToken), 5).unwrap();
    let mut t1 = Tape::new();
    let s1 = m.hidden_states(&mut t1, TrainScope::Frozen, &[4, 5, 6, 7]).unwrap();
    let mut t2 = Tape::new();
    let s2 = m.hidden_states(&mut t2, TrainScope::Frozen, &[4, 5, 11, 2, 3]).unwrap();
    let (a, b) = (t1.value(*s1.last().unwrap()), t2.value(*s2.last().unwrap()));
    for i in 0..2 {
        assert_eq!(a.row(i), b.row(i));
    }
}

#[test]
fn attention_free_mean_pooling_is_permutation_invariant() {
    let mut m = EncoderModel::<f64>::new(tiny(Pooling::Mean), 5).unwrap();
    for l in 0..2 {
        m.remove_sublayer(Group::Attn, l);
    }
    let a = m.encode(&[1, 2, 3, 4]).unwrap();
    let b = m.encode(&[4, 2, 1, 3]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn dropping_equals_zeroing_the_branch() {
    let base = EncoderModel::<f32>::new(tiny(Pooling::LastToken), 9).unwrap();
    let mut dropped = base.clone();
    dropped.remove_sublayer(Group::Mlp, 0);
    dropped.remove_sublayer(Group::Attn, 1);
    let mut zeroed = base.clone();
    let b0 = zeroed.blocks[0].mlp.as_mut().unwrap();
    b0.mlp.down.weight = Tensor::zeros(b0.mlp.down.weight.shape().to_vec());
    let b1 = zeroed.blocks[1].attn.as_mut().unwrap();
    b1.attn.o.weight = Tensor::zeros(b1.attn.o.weight.shape().to_vec());
    for ids in [[1u32, 2, 3].as_slice(), &[7, 7, 7, 7, 1], &[15]] {
        let a = dropped.encode(ids).unwrap();
        let b = zeroed.encode(ids).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn parameter_accounting() {
    let cfg = EncoderConfig {
        d_ff: 32,
        ..tiny(Pooling::Mean)
    };
    let m = EncoderModel::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.blocks[0].mlp.as_ref().unwrap().mlp.num_params(), 3 * 8 * 32);
    let d = 8;
    let expected = 16 * d + 9 * d + 2 * (d + 4 * d * d) + 2 * (d + 3 * d * 32);
    assert_eq!(m.count_params(), expected);
    let mut dropped = m.clone();
    dropped.remove_sublayer(Group::Mlp, 1);
    assert_eq!(m.count_params() - dropped.count_params(), 3 * d * 32 + d);
    let b = m.breakdown();
    assert_eq!(b.mlp, 2 * 3 * d * 32);
    assert_eq!(b.total, m.count_params());
}

#[test]
fn lora_attach_merge() {
    let cfg = EncoderConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 32,
        n_layers: 1,
        ..tiny(Pooling::LastToken)
    };
    let base = EncoderModel::<f32>::new(cfg, 2).unwrap();
    let mut m = base.clone();
    m.attach_lora(&[Proj::Q], 32, 64.0, 1).unwrap();
    assert_eq!(m.count_params() - base.count_params(), 2 * 32 * 64);
    let ids = [1u32, 4, 9, 2];
    let before = base.encode(&ids).unwrap();
    assert_eq!(m.encode(&ids).unwrap(), before);
    assert!(matches!(m.attach_lora(&[Proj::Q], 4, 8.0, 1), Err(Error::Contract(_))));

    m.attach_lora(&[Proj::V, Proj::Gate, Proj::Up, Proj::Down, Proj::O, Proj::K], 4, 8.0, 7).unwrap();
    // pretend training moved B
    for p in m.params_mut() {
        if p.kind == ParamKind::LoraB {
            let n = p.tensor.numel();
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = 0.01 * ((i * 7 % 13) as f32 - 6.0) / n as f32 * 10.0;
            }
        }
    }
    let adapted = m.encode(&ids).unwrap();
    assert_ne!(adapted, before);
    let mut merged = m.clone();
    merged.merge_lora();
    assert!(!merged.has_lora());
    assert_eq!(merged.count_params(), base.count_params());
    let out = merged.encode(&ids).unwrap();
    for (a, b) in adapted.iter().zip(&out) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn lora_requires_present_target_and_positive_rank() {
    let mut m = EncoderModel::<f32>::new(tiny(Pooling::LastToken), 2).unwrap();
    assert!(m.attach_lora(&[Proj::Q], 0, 1.0, 0).is_err());
    for l in 0..2 {
        m.remove_sublayer(Group::Mlp, l);
    }
    assert!(m.attach_lora(&[Proj::Gate], 2, 4.0, 0).is_err());
}

#[test]
fn encode_gradients_match_finite_differences() {
    for pooling in [Pooling::LastToken, Pooling::Mean] {
        let mut m = EncoderModel::<f64>::new(tiny(pooling), 11).unwrap();
        m.attach_lora(&[Proj::Q, Proj::Down], 2, 4.0, 3).unwrap();
        for p in m.params_mut() {
            if p.kind == ParamKind::LoraB {
                p.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 * 0.37).sin());
            }
        }
        let proj: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let loss = |m: &EncoderModel<f64>, t: &mut Tape<f64>, s: TrainScope| {
            let e = m.encode_on(t, s, &[3, 1, 4, 1, 5])?;
            let w = t.constant(Tensor::vector(proj.clone()));
            let y = t.mul(e, w)?;
            Ok(t.sum(y))
        };
        for scope in [TrainScope::Dense, TrainScope::Lora] {
            let r = param_grad_check(&m, scope, loss, 1e-5, 24).unwrap();
            assert!(r.max_rel_err < 1e-4, "{pooling:?} {scope:?}: {r:?}");
            assert!(r.coords > 0);
        }
    }
}
