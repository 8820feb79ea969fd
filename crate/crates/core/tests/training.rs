//! Contracts of the staged trainer on small hand-built datasets.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqmask::data::{Dataset, Sample};
use seqmask::model::{Ablation, Model, ModelConfig, Order};
use seqmask::train::{evaluate, train, train_observed, DomainRoles, StageKind};
use seqmask::Tensor;

const DIM: usize = 4;

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        text_dim: DIM,
        video_dim: DIM,
        text_tokens: 2,
        video_frames: 3,
        heads: 2,
        epochs: 4,
        batch_size: 16,
        ..ModelConfig::default()
    };
    cfg.optimizer.lr = 1e-2;
    cfg.optimizer.warmup_epochs = 0;
    cfg
}

/// Samples whose label is carried by text feature 0 (class index scaled),
/// every other coordinate is standard noise. With `random_labels` the label
/// is drawn independently of the features.
fn toy(n: usize, domain: &str, seed: u64, random_labels: bool) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = rng.random_range(0..3usize);
            let signal = 2.0 * (label as f64 - 1.0);
            let mut noise = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
            let text = (0..2)
                .map(|_| {
                    let mut row = noise(DIM);
                    row[0] = signal + 0.05 * row[0];
                    row
                })
                .collect();
            let video = (0..3).map(|_| noise(DIM)).collect();
            let label = if random_labels { rng.random_range(0..3) } else { label };
            Sample {
                id: format!("{domain}-{i}"),
                domain: domain.into(),
                label,
                text,
                video,
            }
        })
        .collect()
}

fn toy_dataset(random_labels: bool) -> (Dataset, DomainRoles) {
    let mut samples = toy(200, "a", 1, random_labels);
    samples.extend(toy(150, "b", 2, random_labels));
    samples.extend(toy(100, "t", 3, random_labels));
    let ds = Dataset::new(samples);
    let roles = DomainRoles::from_sources(&ds, &["a".into(), "b".into()]).unwrap();
    (ds, roles)
}

fn snapshot(model: &Model) -> BTreeMap<String, Tensor> {
    model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

#[test]
fn separable_feature_is_learned_to_perfect_train_accuracy() {
    let (ds, roles) = toy_dataset(false);
    let mut cfg = small_config();
    cfg.alpha = 0.0;
    cfg.epochs = 100;
    let (_, report) = train(&ds, &cfg, &roles).unwrap();
    let text = &report.stages[0];
    assert_eq!(text.stage, StageKind::Text);
    let first_perfect = text.epochs.iter().position(|e| e.train_accuracy == 1.0);
    assert!(matches!(first_perfect, Some(e) if e < 50), "{first_perfect:?}");
    assert!(report.final_target.overall > 0.95);
}

#[test]
fn frozen_parameters_never_move() {
    let (ds, roles) = toy_dataset(false);
    for order in [Order::TextFirst, Order::VideoFirst, Order::Joint] {
        let mut cfg = small_config();
        cfg.order = order;
        let init = snapshot(&Model::new(cfg.clone()).unwrap());
        let stage_start: RefCell<Option<(StageKind, BTreeMap<String, Tensor>)>> = RefCell::new(None);
        let mut previous = init.clone();
        let mut observer = |info: &seqmask::train::StepInfo<'_>, model: &Model| {
            let now = snapshot(model);
            let mut start = stage_start.borrow_mut();
            if start.as_ref().map(|(k, _)| *k) != Some(info.stage) {
                *start = Some((info.stage, previous.clone()));
            }
            let (_, before) = start.as_ref().unwrap();
            let trainable: Vec<&str> = info.plan.trainable.iter().map(|&id| model.store.name(id)).collect();
            for (name, value) in &now {
                if !trainable.contains(&name.as_str()) {
                    assert_eq!(value, &before[name], "{order:?} {:?} moved {name}", info.stage);
                }
            }
            previous = now;
            Ok(())
        };
        train_observed(&ds, &cfg, &roles, &mut observer).unwrap();
    }
}

#[test]
fn zero_epochs_leaves_initialization_untouched() {
    let (ds, roles) = toy_dataset(false);
    let mut cfg = small_config();
    cfg.epochs = 0;
    let (model, report) = train(&ds, &cfg, &roles).unwrap();
    assert_eq!(snapshot(&model), snapshot(&Model::new(cfg).unwrap()));
    assert!(report.stages.iter().all(|s| s.epochs.is_empty()));
}

#[test]
fn accuracy_on_label_independent_data_is_chance() {
    let mut samples = toy(3000, "a", 4, true);
    samples.extend(toy(3000, "b", 5, true));
    let ds = Dataset::new(samples);
    let cfg = small_config();
    let model = Model::new(cfg).unwrap();
    let eval = evaluate(&model, &ds, Ablation::None).unwrap();
    assert!((eval.overall - 1.0 / 3.0).abs() < 0.02, "{}", eval.overall);
}

#[test]
fn overall_accuracy_is_sample_weighted_over_domains() {
    let (ds, roles) = toy_dataset(false);
    let (model, _) = train(&ds, &small_config(), &roles).unwrap();
    let eval = evaluate(&model, &ds, Ablation::None).unwrap();
    let n: usize = eval.domains.values().map(|d| d.n).sum();
    let c: usize = eval.domains.values().map(|d| d.correct).sum();
    assert_eq!(n, ds.len());
    assert_eq!(eval.domains["a"].n, 200);
    assert_eq!(eval.domains["t"].n, 100);
    assert!((eval.overall - c as f64 / n as f64).abs() < 1e-15);
    for d in eval.domains.values() {
        assert!((d.accuracy - d.correct as f64 / d.n as f64).abs() < 1e-15);
    }
    let both = eval.mean_over(&["a".into(), "t".into()]).unwrap();
    let (a, t) = (&eval.domains["a"], &eval.domains["t"]);
    assert!((both - (a.correct + t.correct) as f64 / 300.0).abs() < 1e-15);
    assert_eq!(eval.mean_over(&["missing".into()]), None);
}

#[test]
fn batch_loss_is_the_sum_of_its_parts() {
    let (ds, roles) = toy_dataset(false);
    for order in [Order::TextFirst, Order::Joint] {
        let mut cfg = small_config();
        cfg.order = order;
        cfg.alpha = 0.05;
        let alpha = cfg.alpha;
        let mut saw_recon = false;
        let mut observer = |info: &seqmask::train::StepInfo<'_>, _: &Model| {
            let p = info.parts;
            assert!((p.total - (p.ce + alpha * p.sparse + p.recon)).abs() < 1e-10, "{p:?}");
            saw_recon |= p.recon > 0.0;
            Ok(())
        };
        train_observed(&ds, &cfg, &roles, &mut observer).unwrap();
        assert!(saw_recon, "{order:?}: keyframe stage should add a reconstruction term");
    }
}

#[test]
fn training_is_deterministic() {
    let (ds, roles) = toy_dataset(false);
    let cfg = small_config();
    let (m1, r1) = train(&ds, &cfg, &roles).unwrap();
    let (m2, r2) = train(&ds, &cfg, &roles).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(snapshot(&m1), snapshot(&m2));
}
