use super::*;
use crate::dataset::{Corpus, EmotionLabel, Modality, ModalityDims, Sample, Split};
use crate::numerics::{finite_diff_grad, relative_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn toy(input: usize, hidden: usize, seed: u64) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::init(EncoderShape::new(input, hidden), &mut rng);
    // Non-trivial biases and gains so every term of the forward pass matters.
    for t in [
        &mut p.b_in,
        &mut p.b_v,
        &mut p.b_o,
        &mut p.ln1_bias,
        &mut p.b_f1,
        &mut p.b_f2,
        &mut p.ln2_bias,
        &mut p.b_c,
    ] {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    for t in [&mut p.ln1_gain, &mut p.ln2_gain] {
        for v in t.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
    }
    p
}

fn input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

// Straight-line reference using explicit index loops only.
fn vec_mat(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

fn ln_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| g[j] * (v - mu) / (var + 1e-8).sqrt() + b[j])
        .collect()
}

fn oracle(x: &[f64], p: &EncoderParams) -> (Vec<f64>, Vec<f64>) {
    let proj = vec_mat(x, &p.w_in, &p.b_in);
    let v = vec_mat(&proj, &p.w_v, &p.b_v);
    let att = vec_mat(&v, &p.w_o, &p.b_o);
    let r1: Vec<f64> = proj.iter().zip(&att).map(|(a, b)| a + b).collect();
    let y1 = ln_ref(&r1, &p.ln1_gain, &p.ln1_bias);
    let z: Vec<f64> = vec_mat(&y1, &p.w_f1, &p.b_f1)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let f = vec_mat(&z, &p.w_f2, &p.b_f2);
    let r2: Vec<f64> = y1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let h = ln_ref(&r2, &p.ln2_gain, &p.ln2_bias);
    let logits = vec_mat(&h, &p.w_c, &p.b_c);
    (h, logits)
}

fn rng0() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn forward_matches_reference() {
    let p = toy(7, 5, 1);
    for s in 0..5 {
        let x = input(7, 100 + s);
        let (h, logits) = encoder_forward(&x, &p, Mode::Infer, &mut rng0()).unwrap();
        let (h_ref, l_ref) = oracle(&x, &p);
        for (a, b) in h.iter().zip(&h_ref) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in logits.iter().zip(&l_ref) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn batched_forward_equals_rowwise() {
    let p = toy(6, 4, 2);
    let rows: Vec<Vec<f64>> = (0..9).map(|s| input(6, s)).collect();
    let h = p.hidden(&Matrix::from_rows(&rows, 6).unwrap());
    for (r, x) in rows.iter().enumerate() {
        let (hr, _) = oracle(x, &p);
        for (a, b) in h.row(r).iter().zip(&hr) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let p = toy(8, 6, 3);
    let x = input(8, 4);
    let a = encoder_forward(&x, &p, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = encoder_forward(&x, &p, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_input_stays_finite() {
    let mut rng = rng0();
    let p = EncoderParams::init(EncoderShape::new(16, 8), &mut rng);
    let (h, logits) = encoder_forward(&[0.0; 16], &p, Mode::Infer, &mut rng).unwrap();
    assert!(h.iter().chain(logits.iter()).all(|v| v.is_finite()));
}

#[test]
fn wrong_width_is_rejected() {
    let p = toy(8, 4, 0);
    assert!(matches!(
        encoder_forward(&[0.0; 7], &p, Mode::Infer, &mut rng0()),
        Err(RamerError::DimensionMismatch {
            expected: 8,
            got: 7
        })
    ));
    assert!(matches!(
        encoder_backward(&[0.0; 8], &p, 6, None),
        Err(RamerError::TargetOutOfRange { target: 6, .. })
    ));
}

fn set_flat(p: &mut EncoderParams, flat: &[f64]) {
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn flat(p: &EncoderParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.iter().copied()).collect()
}

#[test]
fn gradients_match_finite_differences() {
    let p = toy(16, 6, 7);
    let x = input(16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask = dropout_mask(1, 6, 0.5, &mut rng);
    for mask in [None, Some(mask.as_slice())] {
        for target in [0, 3] {
            let (_, g) = encoder_backward(&x, &p, target, mask).unwrap();
            let theta = flat(&p);
            let numeric = finite_diff_grad(
                |t| {
                    let mut q = p.clone();
                    set_flat(&mut q, t);
                    encoder_backward(&x, &q, target, mask).unwrap().0
                },
                &theta,
                1e-5,
            );
            let analytic = flat(&g);
            let mut worst: f64 = 0.0;
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n));
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }
}

#[test]
fn confident_correct_prediction_has_no_gradient() {
    let mut p = toy(8, 4, 11);
    p.w_c = Matrix::zeros(4, NUM_CLASSES);
    p.b_c = vec![-60.0; NUM_CLASSES];
    p.b_c[2] = 60.0;
    let (loss, g) = encoder_backward(&input(8, 1), &p, 2, None).unwrap();
    assert!(loss < 1e-12);
    for t in g.tensors() {
        assert!(t.iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn zero_input_gives_zero_projection_gradient() {
    let p = toy(8, 4, 12);
    let (_, g) = encoder_backward(&[0.0; 8], &p, 1, None).unwrap();
    assert!(g.w_in.as_slice().iter().all(|v| *v == 0.0));
    assert!(g.b_in.iter().any(|v| *v != 0.0));
}

#[test]
fn dropped_units_get_no_head_gradient() {
    let p = toy(8, 4, 13);
    let mask = [2.0, 0.0, 2.0, 0.0];
    let (_, g) = encoder_backward(&input(8, 2), &p, 0, Some(&mask)).unwrap();
    for r in [1, 3] {
        assert!(g.w_c.row(r).iter().all(|v| *v == 0.0));
    }
}

proptest! {
    #[test]
    fn layer_norm_standardizes(row in prop::collection::vec(-50.0f64..50.0, 4..32), shift in -100.0f64..100.0) {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        prop_assume!(var > 1e-2);
        let x: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let m = Matrix::from_vec(1, x.len(), x).unwrap();
        let ones = vec![1.0; row.len()];
        let zeros = vec![0.0; row.len()];
        let (_, _, out) = layer_norm(&m, &ones, &zeros);
        let o = out.row(0);
        let mean = o.iter().sum::<f64>() / n;
        let v = o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hidden_is_finite_for_bounded_inputs(x in prop::collection::vec(-1e3f64..1e3, 12)) {
        let p = toy(12, 8, 5);
        let (h, l) = encoder_forward(&x, &p, Mode::Infer, &mut rng0()).unwrap();
        prop_assert!(h.iter().chain(l.iter()).all(|v| v.is_finite()));
    }
}

#[test]
fn dropout_preserves_expected_logits() {
    let p = toy(8, 16, 21);
    let x = input(8, 3);
    let (_, infer) = encoder_forward(&x, &p, Mode::Infer, &mut rng0()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let draws = 100_000;
    let mut acc = [0.0; NUM_CLASSES];
    for _ in 0..draws {
        let (_, l) = encoder_forward(&x, &p, Mode::Train { dropout: 0.5 }, &mut rng).unwrap();
        for (a, v) in acc.iter_mut().zip(l.iter()) {
            *a += v;
        }
    }
    for (a, e) in acc.iter().zip(infer.iter()) {
        assert!(
            (a / draws as f64 - e).abs() < 1e-2,
            "{} vs {e}",
            a / draws as f64
        );
    }
}

#[test]
fn dropout_mask_values() {
    let m = dropout_mask(50, 40, 0.25, &mut rng0());
    let zeros = m.as_slice().iter().filter(|v| **v == 0.0).count();
    assert!(m
        .as_slice()
        .iter()
        .all(|v| *v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-15));
    assert!((zeros as f64 / 2000.0 - 0.25).abs() < 0.05);
}

#[test]
fn sgd_momentum_update() {
    let mut p = vec![1.0, -2.0];
    let mut opt = Sgd::new(0.1, 0.9, [p.as_slice()]);
    opt.step([p.as_mut_slice()], [[1.0, 0.5].as_slice()]);
    assert_eq!(p, vec![0.9, -2.05]);
    opt.step([p.as_mut_slice()], [[1.0, 0.5].as_slice()]);
    // velocity becomes 1.9 and 0.95
    assert!((p[0] - 0.71).abs() < 1e-12 && (p[1] + 2.145).abs() < 1e-12);
}

fn toy_checkpoint(dims: [usize; 3], hidden: usize) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    Checkpoint {
        encoders: dims.map(|d| EncoderParams::init(EncoderShape::new(d, hidden), &mut rng)),
        meta: CheckpointMeta {
            epoch: 7,
            val_wa: 61.25,
            seed: 99,
            config_hash: "abc".into(),
        },
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ck");
    let ck = toy_checkpoint([10, 6, 12], 4);
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.hash(), ck.hash());
    let x = input(10, 1);
    let a = encoder_forward(&x, &ck.encoders[0], Mode::Infer, &mut rng0()).unwrap();
    let b = encoder_forward(&x, &back.encoders[0], Mode::Infer, &mut rng0()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ck");
    let bytes = toy_checkpoint([5, 5, 5], 3).to_bytes();

    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut flipped = bytes.clone();
    flipped[40] ^= 0x10;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(RamerError::CrcMismatch { .. })
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(RamerError::BadMagic { .. })
    ));
}

#[test]
fn checkpoint_dims_must_match_corpus() {
    let ck = toy_checkpoint([64, 64, 64], 4);
    let err = ck
        .ensure_dims(&ModalityDims::new(1024, 768, 5120))
        .unwrap_err();
    assert!(matches!(
        err,
        RamerError::DimensionMismatch {
            expected: 1024,
            got: 64
        }
    ));
    ck.ensure_dims(&ModalityDims::new(64, 64, 64)).unwrap();
}

/// Two well separated clusters (happy vs sad) in every modality.
fn separable_corpus(per_class: usize) -> Corpus {
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut corpus = Corpus::new(ModalityDims::new(dim, dim, dim));
    let mut assign = HashMap::new();
    let mut ids = Vec::new();
    for (c, label) in [EmotionLabel::from_code(0), EmotionLabel::from_code(1)]
        .into_iter()
        .enumerate()
    {
        for i in 0..per_class {
            let id = format!("s{c}_{i}");
            let mut s = Sample::new(id.clone(), label);
            for m in Modality::ALL {
                let sign = if c == 0 { 1.0 } else { -1.0 };
                let v = (0..dim)
                    .map(|j| {
                        (if j == 0 { 3.0 * sign } else { 0.0 }) + rng.random_range(-0.5..0.5f32)
                    })
                    .collect();
                s = s.with_embedding(m, v);
            }
            corpus.push(s).unwrap();
            ids.push((id, i));
        }
    }
    for (id, i) in &ids {
        let split = if i % 5 == 0 {
            Split::Val
        } else if i % 5 == 1 {
            Split::Test
        } else {
            Split::Train
        };
        assign.insert(id.as_str(), split);
    }
    corpus.with_splits(&assign)
}

fn small_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 8,
        learning_rate: 1e-2,
        hidden: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_fits_separable_data() {
    let corpus = separable_corpus(30);
    let out = pretrain_full_modality(&corpus, &small_train_cfg()).unwrap();
    let train: Vec<&Sample> = corpus
        .samples()
        .iter()
        .filter(|s| s.split == Some(Split::Train))
        .collect();
    let truth = labels_of(&train);
    for m in Modality::ALL {
        let preds = train::predict_unimodal(out.checkpoint.encoder(m), &train, m).unwrap();
        assert_eq!(
            crate::eval::accuracy_pct(&preds, &truth),
            100.0,
            "{}",
            m.name()
        );
    }
}

#[test]
fn pretraining_is_deterministic_and_keeps_best_epoch() {
    let corpus = separable_corpus(20);
    let cfg = TrainConfig {
        epochs: 6,
        ..small_train_cfg()
    };
    let a = pretrain_full_modality(&corpus, &cfg).unwrap();
    let b = pretrain_full_modality(&corpus, &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 6);
    let best = a
        .history
        .iter()
        .map(|r| r.mean_val_wa)
        .fold(f64::MIN, f64::max);
    assert_eq!(a.checkpoint.meta.val_wa, best);
    let first = a.history.iter().find(|r| r.mean_val_wa == best).unwrap();
    assert_eq!(a.checkpoint.meta.epoch, first.epoch);

    let other = pretrain_full_modality(&corpus, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(other.checkpoint.to_bytes(), a.checkpoint.to_bytes());
}

#[test]
fn pretraining_needs_train_and_val() {
    let corpus = separable_corpus(10);
    let none: HashMap<&str, Split> = HashMap::new();
    assert!(matches!(
        pretrain_full_modality(&corpus.with_splits(&none), &small_train_cfg()),
        Err(RamerError::EmptyTrainSplit)
    ));
    assert!(TrainConfig {
        dropout_rate: 1.0,
        ..small_train_cfg()
    }
    .validate()
    .is_err());
}
