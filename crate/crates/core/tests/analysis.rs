//! Null-distribution calibration and identities of the analysis suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqmask::analysis::{
    column, cross_modal_independence, evidence_matrix, fisher_z, intra_modal_independence, label_correlation,
    LabelEncoding, DEFAULT_LEVEL,
};
use seqmask::autodiff::Tape;
use seqmask::data::{Batch, Dataset};
use seqmask::model::{ForwardOptions, Model, ModelConfig, Predictor};
use seqmask::synth::{default_task, generate_dataset};
use seqmask::{Modality, Tensor};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn null_rejection_rate_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs = 10_000;
    let mut rejected = 0;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        rejected += usize::from(fisher_z(&x, &y, DEFAULT_LEVEL).unwrap().dependent);
    }
    let rate = rejected as f64 / pairs as f64;
    assert!((rate - 0.05).abs() <= 0.01, "{rate}");
}

#[test]
fn z_statistic_at_half_correlation() {
    // Build vectors with sample correlation exactly 0.5: y = 0.5 x + sqrt(0.75) e
    // with x and e centered, orthogonal and of equal norm.
    let n = 103;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let center = |v: &mut Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|a| *a -= m);
    };
    center(&mut x);
    center(&mut e);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let proj = dot(&e, &x) / dot(&x, &x);
    e.iter_mut().zip(&x).for_each(|(a, b)| *a -= proj * b);
    let scale = (dot(&x, &x) / dot(&e, &e)).sqrt();
    e.iter_mut().for_each(|a| *a *= scale);
    let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| 0.5 * a + 0.75f64.sqrt() * b).collect();
    let f = fisher_z(&x, &y, DEFAULT_LEVEL).unwrap();
    assert!((f.z - 5.4931).abs() < 1e-3, "{}", f.z);
    assert!(f.dependent);
}

#[test]
fn independent_features_are_mostly_accepted() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = gaussian(&mut rng, 2000, 10);
    let v = gaussian(&mut rng, 2000, 10);
    let all: Vec<usize> = (0..10).collect();
    let cross = cross_modal_independence(&t, &v, &all, &all, DEFAULT_LEVEL).unwrap();
    assert!(cross.mean_independent_ratio().unwrap() >= 0.9);
    let intra = intra_modal_independence(&t, &all, DEFAULT_LEVEL).unwrap();
    assert!(intra.mean_independent_ratio().unwrap() >= 0.9);
    let empty = cross_modal_independence(&t, &v, &all, &[], DEFAULT_LEVEL).unwrap();
    assert!(empty.features.iter().all(|f| f.independent + f.dependent == 0));
}

#[test]
fn pure_noise_label_test_accepts_about_95_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = gaussian(&mut rng, 2000, 400);
    let labels: Vec<usize> = (0..2000).map(|_| rng.random_range(0..3)).collect();
    let rep = label_correlation(&x, &labels, 3, &[], LabelEncoding::Ordinal, DEFAULT_LEVEL).unwrap();
    let accepted = rep.tests.iter().filter(|t| !t.dependent).count() as f64 / 400.0;
    assert!((accepted - 0.95).abs() < 0.03, "{accepted}");
}

#[test]
fn evidence_columns_sum_to_text_logits() {
    let config = ModelConfig {
        text_dim: 8,
        video_dim: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(config).unwrap();
    let (mut causal, mut domains) = default_task(3, 4);
    causal.text = seqmask::synth::ModalitySpec::random_layout(8, 2, 2, 1.0, 3).unwrap();
    causal.video = seqmask::synth::ModalitySpec::random_layout(8, 2, 2, 0.5, 4).unwrap();
    domains.truncate(1);
    let ds: Dataset = generate_dataset(&causal, &domains).unwrap();
    let batch: Batch = ds.batch(&[0, 1, 2, 3]).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model
        .forward(&mut tape, &batch, &ForwardOptions::eval(Predictor::Text), &mut rng)
        .unwrap();
    let fused = tape.value(fwd.text_fused.unwrap()).clone();
    let logits = tape.value(fwd.logits).clone();
    let w = model.store.get(model.parts.text_head.weight);
    let b = model.store.get(model.parts.text_head.bias);
    let mask = model.mask_state(Modality::Text).vector();
    for i in 0..4 {
        let r = evidence_matrix(w, fused.row(i), None).unwrap();
        for k in 0..3 {
            let col: f64 = column(&r, k).iter().sum();
            assert!((col + b.data()[k] - logits.row(i)[k]).abs() < 1e-12);
        }
        // Masked variant: rows of removed features vanish.
        let rm = evidence_matrix(w, fused.row(i), Some(&mask)).unwrap();
        for (j, &mj) in mask.iter().enumerate() {
            if mj == 0.0 {
                assert!(rm.row(j).iter().all(|&v| v == 0.0));
            }
        }
    }
}
