use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::labels::LabelVector;
use crate::tokenizer::TokenSequence;

fn cfg(v: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        context_width: 16,
        embed_dim: 8,
        hidden_dim: 12,
        num_heads: 2,
        vocab_size: v,
        ..ModelConfig::default()
    }
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence {
        ids: ids.to_vec(),
        attention_length: ids.len(),
    }
}

#[test]
fn init_deterministic() {
    let a = EncoderModel::init(cfg(20), 7).unwrap();
    let b = EncoderModel::init(cfg(20), 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, EncoderModel::init(cfg(20), 8).unwrap());
}

#[test]
fn heads_must_divide_width() {
    let c = ModelConfig {
        num_heads: 3,
        ..cfg(20)
    };
    assert!(EncoderModel::init(c, 0).is_err());
}

#[test]
fn toy_parameter_count() {
    let c = ModelConfig {
        num_blocks: 2,
        context_width: 128,
        embed_dim: 64,
        hidden_dim: 256,
        num_heads: 4,
        vocab_size: 1000,
        ..ModelConfig::default()
    };
    // 64000 + 8192 + 2 * 49984 + 128 + 64000 + 320
    assert_eq!(c.parameter_count(), 236_608);
    assert_eq!(EncoderModel::init(c, 0).unwrap().parameter_count(), 236_608);
}

#[test]
fn bos_eos_only() {
    let m = EncoderModel::init(cfg(20), 1).unwrap();
    let x = m.encode_sequence(&seq(&[0, 1])).unwrap();
    assert_eq!(x.dim(), (2, 8));
    assert!(x.iter().all(|v| v.is_finite()));
}

#[test]
fn overlong_and_out_of_range() {
    let m = EncoderModel::init(cfg(20), 1).unwrap();
    assert!(matches!(m.encode_sequence(&seq(&[5; 17])), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    assert!(matches!(m.encode_sequence(&seq(&[0, 25, 1])), Err(Error::TokenOutOfRange { id: 25, .. })));
}

#[test]
fn order_matters() {
    let m = EncoderModel::init(cfg(20), 1).unwrap();
    let a = m.encode_sequence(&seq(&[0, 7, 9, 1])).unwrap();
    let b = m.encode_sequence(&seq(&[0, 9, 7, 1])).unwrap();
    let diff = (&a - &b).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn pads_do_not_leak() {
    let m = EncoderModel::init(cfg(20), 2).unwrap();
    let plain = seq(&[0, 7, 9, 11, 1]);
    let padded = plain.clone().padded(12, 3);
    let a = m.encode_sequence(&plain).unwrap();
    let b = m.encode_sequence(&padded).unwrap();
    for t in 0..5 {
        for j in 0..8 {
            assert!((a[[t, j]] - b[[t, j]]).abs() < 1e-12);
        }
    }
    let pa = m.predict_proba(&plain).unwrap();
    let pb = m.predict_proba(&padded).unwrap();
    assert!(pa.iter().zip(&pb).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn mlm_logits_products() {
    let mut m = EncoderModel::init(cfg(20), 3).unwrap();
    let x = m.encode_sequence(&seq(&[0, 4, 5, 1])).unwrap();
    let logits = m.mlm_logits(&x);
    for t in 0..4 {
        for k in 0..20 {
            let mut s = 0.0;
            for j in 0..8 {
                s += x[[t, j]] * m.params.mlm_head[[j, k]];
            }
            assert!((logits[[t, k]] - s).abs() < 1e-12);
        }
    }
    let mut eye = Array2::zeros((1, 8));
    eye[[0, 2]] = 1.0;
    assert_eq!(m.mlm_logits(&eye)[[0, 6]], m.params.mlm_head[[2, 6]]);
    m.params.mlm_head.fill(0.0);
    assert!(m.mlm_logits(&x).iter().all(|v| *v == 0.0));
}

#[test]
fn cls_uses_first_row() {
    let mut m = EncoderModel::init(cfg(20), 3).unwrap();
    let mut x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
    let a = m.cls_logits(&x);
    x.row_mut(2).fill(9.0);
    assert_eq!(a, m.cls_logits(&x));
    m.params.cls_head.fill(0.0);
    m.params.cls_head[[1, 3]] = 2.0;
    m.params.cls_head[[7, 3]] = -1.0;
    // 0.1 * 2 + 0.7 * -1
    assert!((m.cls_logits(&x)[3] - (0.2 - 0.7)).abs() < 1e-12);
    m.params.cls_head.fill(0.0);
    assert_eq!(m.predict_proba(&seq(&[0, 4, 1])).unwrap(), vec![0.5; 5]);
}

#[test]
fn mlm_loss_values() {
    let uniform = Array2::zeros((3, 50));
    assert!((loss_mlm(&uniform, &[4, 9], &[0, 2]).unwrap() - 50f64.ln()).abs() < 1e-12);
    let mut sharp = Array2::zeros((2, 10));
    sharp[[1, 3]] = 60.0;
    assert!(loss_mlm(&sharp, &[3], &[1]).unwrap() < 1e-20);
    assert!(matches!(loss_mlm(&sharp, &[], &[]), Err(Error::NoMaskedPositions)));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits: Array2<f64> = Array2::from_shape_fn((4, 6), |_| rng.random_range(-3.0..3.0));
    let (pos, tgt) = ([0usize, 3], [5u32, 1]);
    let oracle: f64 = pos
        .iter()
        .zip(tgt)
        .map(|(&p, t)| {
            let z: f64 = (0..6).map(|k| logits[[p, k]].exp()).sum();
            -(logits[[p, t as usize]].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    assert!((loss_mlm(&logits, &tgt, &pos).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn multilabel_loss_values() {
    let y = LabelVector([true, false, true, false, false]);
    assert!((loss_multilabel(&[0.0; 5], &y) - 2f64.ln()).abs() < 1e-15);
    assert!(loss_multilabel(&[20.0; 5], &LabelVector([true; 5])) < 3e-9);
    let z = [1.5, -0.5, 0.0, 2.0, -3.0];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let oracle = (-(sig(1.5)).ln() - (1.0 - sig(-0.5)).ln() - sig(0.0).ln() - (1.0 - sig(2.0)).ln()
        - (1.0 - sig(-3.0)).ln())
        / 5.0;
    assert!((loss_multilabel(&z, &y) - oracle).abs() < 1e-12);
}

/// Weights scaled up so gradients are far from zero everywhere.
fn spread(model: &mut EncoderModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v * 3.0 + rng.random_range(-0.05..0.05));
    }
}

fn set(model: &mut EncoderModel, tensor: usize, idx: usize, value: f64) -> f64 {
    let mut ts = model.params.tensors_mut();
    let old = ts[tensor].1[idx];
    ts[tensor].1[idx] = value;
    old
}

fn max_rel_error(model: &EncoderModel, batch: &[TokenSequence], obj: Objective<'_>, samples: usize) -> f64 {
    let (_, grads) = model.backward(batch, obj).unwrap();
    let g = grads.tensors();
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (ti, (name, gt)) in g.iter().enumerate() {
        let mut idx: Vec<usize> = (0..samples).map(|_| rng.random_range(0..gt.len())).collect();
        let top = (0..gt.len()).max_by(|&a, &b| gt[a].abs().total_cmp(&gt[b].abs())).unwrap();
        idx.push(top);
        for i in idx {
            let x = set(&mut probe, ti, i, 0.0);
            set(&mut probe, ti, i, x + h);
            let up = probe.loss(batch, obj).unwrap();
            set(&mut probe, ti, i, x - h);
            let down = probe.loss(batch, obj).unwrap();
            set(&mut probe, ti, i, x);
            let num = (up - down) / (2.0 * h);
            let err = (num - gt[i]).abs() / num.abs().max(gt[i].abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{i}]: analytic {} numeric {num}", gt[i]);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = EncoderModel::init(cfg(12), 5).unwrap();
    spread(&mut m, 1);
    let batch = vec![seq(&[0, 5, 6, 7, 1]), seq(&[0, 8, 2, 1]).padded(6, 3)];
    let mlm = [
        MlmTarget {
            positions: vec![1, 3],
            targets: vec![9, 7],
        },
        MlmTarget {
            positions: vec![2],
            targets: vec![10],
        },
    ];
    max_rel_error(&m, &batch, Objective::Mlm(&mlm), 6);
    let labels = [LabelVector([true, false, false, true, false]), LabelVector([false, true, false, false, true])];
    max_rel_error(&m, &batch, Objective::Multilabel(&labels), 6);
}

#[test]
fn unused_rows_get_no_gradient() {
    let m = EncoderModel::init(cfg(12), 5).unwrap();
    let batch = [seq(&[0, 5, 6, 1])];
    let t = [MlmTarget {
        positions: vec![1],
        targets: vec![5],
    }];
    let (_, g) = m.backward(&batch, Objective::Mlm(&t)).unwrap();
    for id in [2usize, 3, 4, 7, 8, 9, 10, 11] {
        assert!(g.token_embedding.row(id).iter().all(|v| *v == 0.0));
    }
    assert!(g.token_embedding.row(5).iter().any(|v| *v != 0.0));
    for p in 4..16 {
        assert!(g.position_embedding.row(p).iter().all(|v| *v == 0.0));
    }
    assert!(g.cls_head.iter().all(|v| *v == 0.0));
}

#[test]
fn non_finite_gradient_named() {
    let mut m = EncoderModel::init(cfg(12), 5).unwrap();
    m.params.cls_head[[0, 0]] = f64::NAN;
    let err = m
        .backward(&[seq(&[0, 5, 1])], Objective::Multilabel(&[LabelVector::empty()]))
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(_)));
}

#[test]
fn extension_preserves_outputs() {
    let m = EncoderModel::init(cfg(20), 6).unwrap();
    let wide = m.extend_context(32).unwrap();
    assert_eq!(wide.config.context_width, 32);
    for r in 0..16 {
        assert_eq!(wide.params.position_embedding.row(r), wide.params.position_embedding.row(r + 16));
    }
    let s = seq(&[0, 4, 9, 13, 1]);
    let a = m.encode_sequence(&s).unwrap();
    let b = wide.encode_sequence(&s).unwrap();
    assert!((&a - &b).iter().all(|v| v.abs() <= 1e-12));
    assert_eq!(wide.extend_context(64).unwrap(), m.extend_context(64).unwrap());
    assert!(m.extend_context(24).is_err());
    assert!(wide.encode_sequence(&seq(&[5; 30])).is_ok());
}

#[test]
fn checkpoint_roundtrip() {
    let m = EncoderModel::init(cfg(20), 9).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.config, m.config);
    for ((_, a), (_, b)) in m.params.tensors().iter().zip(back.params.tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y));
    }
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint(&extra[..]).is_err());
}
