//! Sequential training, evaluation and the per-stage report.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::keyframe::SampleMode;
use crate::mask::Modality;
use crate::model::{argmax_rows, Ablation, ForwardOptions, Model, ModelConfig, Order, Predictor};
use crate::nn::ParamId;
use crate::optim::Adam;

/// Rows per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

/// Salt separating the evaluation noise stream from the training stream.
const EVAL_STREAM: u64 = 0x0e7a_1000;

/// Source/target roles of the domains in a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRoles {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

impl DomainRoles {
    /// Every domain not listed as a source is a target.
    pub fn from_sources(dataset: &Dataset, sources: &[String]) -> Result<Self> {
        let all = dataset.domains();
        for s in sources {
            if !all.contains(s) {
                return Err(Error::Data(format!("source domain `{s}` not present in dataset")));
            }
        }
        if sources.is_empty() {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        Ok(DomainRoles {
            sources: sources.to_vec(),
            targets: all.into_iter().filter(|d| !sources.contains(d)).collect(),
        })
    }
}

/// Deterministic per-domain train/validation split of the source domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: BTreeMap<String, Vec<usize>>,
    pub targets: BTreeMap<String, Vec<usize>>,
}

impl Split {
    pub fn new(dataset: &Dataset, roles: &DomainRoles, val_fraction: f64, seed: u64) -> Result<Self> {
        let by_domain = dataset.indices_by_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711_7000);
        let mut train = Vec::new();
        let mut val = BTreeMap::new();
        for d in &roles.sources {
            let mut idx = by_domain.get(d).cloned().unwrap_or_default();
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).round() as usize;
            if n_val >= idx.len() {
                return Err(Error::Data(format!("source domain `{d}` has too few samples to split")));
            }
            let (v, t) = idx.split_at(n_val);
            train.extend_from_slice(t);
            if !v.is_empty() {
                val.insert(d.clone(), v.to_vec());
            }
        }
        train.sort_unstable();
        let targets = roles
            .targets
            .iter()
            .map(|d| (d.clone(), by_domain.get(d).cloned().unwrap_or_default()))
            .collect();
        Ok(Split { train, val, targets })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictor: Predictor,
    pub ablation: Ablation,
    pub domains: BTreeMap<String, DomainAccuracy>,
    /// Sample-weighted accuracy over all evaluated domains.
    pub overall: f64,
}

impl Evaluation {
    /// Sample-weighted accuracy over a subset of domains.
    pub fn mean_over(&self, domains: &[String]) -> Option<f64> {
        let (mut n, mut c) = (0, 0);
        for d in domains {
            if let Some(a) = self.domains.get(d) {
                n += a.n;
                c += a.correct;
            }
        }
        (n > 0).then(|| c as f64 / n as f64)
    }
}

/// Accuracy per domain over the given sample indices.
pub fn evaluate_indices(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    predictor: Predictor,
    ablation: Ablation,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ EVAL_STREAM);
    let mut domains: BTreeMap<String, DomainAccuracy> = BTreeMap::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch(chunk)?;
        let preds = model.predict(&batch, predictor, ablation, &mut rng)?;
        for ((p, y), d) in preds.iter().zip(&batch.labels).zip(&batch.domains) {
            let e = domains.entry(d.clone()).or_insert(DomainAccuracy {
                n: 0,
                correct: 0,
                accuracy: 0.0,
            });
            e.n += 1;
            e.correct += usize::from(p == y);
        }
    }
    let (mut n, mut c) = (0, 0);
    for a in domains.values_mut() {
        a.accuracy = a.correct as f64 / a.n as f64;
        n += a.n;
        c += a.correct;
    }
    Ok(Evaluation {
        predictor,
        ablation,
        domains,
        overall: if n > 0 { c as f64 / n as f64 } else { 0.0 },
    })
}

/// Accuracy per domain with the model's final classifier.
pub fn evaluate(model: &Model, dataset: &Dataset, ablation: Ablation) -> Result<Evaluation> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    evaluate_indices(model, dataset, &all, model.final_predictor(), ablation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Text,
    Video,
    Joint,
}

/// What one stage optimizes.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub kind: StageKind,
    pub epochs: usize,
    pub predictor: Predictor,
    pub trainable: Vec<ParamId>,
    pub detach: Option<Modality>,
    /// Modalities whose sparsity penalty enters the loss.
    pub sparse: Vec<Modality>,
    /// Add the text-head loss on the text fused vector (joint order).
    pub text_aux: bool,
}

fn video_path_prefixes(keyframe: bool) -> Vec<&'static str> {
    if keyframe {
        vec!["video.", "keyframe.", "recon."]
    } else {
        vec!["video."]
    }
}

/// Stage plans for the configured order.
pub fn plan_stages(model: &Model) -> Vec<StagePlan> {
    let cfg = &model.config;
    let (e1, e2) = cfg.stage_epochs();
    let video = video_path_prefixes(cfg.keyframe);
    let ids = |prefixes: &[&str]| model.params_with_prefix(prefixes);
    match cfg.order {
        Order::TextFirst => {
            let mut second = video.clone();
            second.push("head.fusion.");
            if cfg.unfreeze {
                second.push("text.");
            }
            vec![
                StagePlan {
                    kind: StageKind::Text,
                    epochs: e1,
                    predictor: Predictor::Text,
                    trainable: ids(&["text.", "head.text."]),
                    detach: None,
                    sparse: vec![Modality::Text],
                    text_aux: false,
                },
                StagePlan {
                    kind: StageKind::Video,
                    epochs: e2,
                    predictor: Predictor::Fusion,
                    trainable: ids(&second),
                    detach: (!cfg.unfreeze).then_some(Modality::Text),
                    sparse: if cfg.unfreeze {
                        vec![Modality::Text, Modality::Video]
                    } else {
                        vec![Modality::Video]
                    },
                    text_aux: false,
                },
            ]
        }
        Order::VideoFirst => {
            let mut first = video.clone();
            first.push("head.video.");
            let mut second = vec!["text.", "head.fusion."];
            if cfg.unfreeze {
                second.extend(&video);
            }
            vec![
                StagePlan {
                    kind: StageKind::Video,
                    epochs: e1,
                    predictor: Predictor::Video,
                    trainable: ids(&first),
                    detach: None,
                    sparse: vec![Modality::Video],
                    text_aux: false,
                },
                StagePlan {
                    kind: StageKind::Text,
                    epochs: e2,
                    predictor: Predictor::Fusion,
                    trainable: ids(&second),
                    detach: (!cfg.unfreeze).then_some(Modality::Video),
                    sparse: if cfg.unfreeze {
                        vec![Modality::Text, Modality::Video]
                    } else {
                        vec![Modality::Text]
                    },
                    text_aux: false,
                },
            ]
        }
        Order::Joint => {
            let mut all = video.clone();
            all.extend(["text.", "head.text.", "head.fusion."]);
            vec![StagePlan {
                kind: StageKind::Joint,
                epochs: e1,
                predictor: Predictor::Fusion,
                trainable: ids(&all),
                detach: None,
                sparse: vec![Modality::Text, Modality::Video],
                text_aux: true,
            }]
        }
    }
}

/// Scalar pieces of one batch objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    /// Unweighted sum of the active sparsity penalties.
    pub sparse: f64,
    pub recon: f64,
    pub total: f64,
}

/// Builds the stage objective on `tape`. Returns the loss node, its parts
/// and the logits used for training accuracy.
pub fn stage_loss(
    model: &Model,
    plan: &StagePlan,
    tape: &mut Tape,
    batch: &Batch,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts, Var)> {
    let opts = ForwardOptions {
        predictor: plan.predictor,
        mode: SampleMode::Train,
        temperature,
        ablation: Ablation::None,
        detach: plan.detach,
    };
    let fwd = model.forward(tape, batch, &opts, rng)?;
    let mut ce = tape.cross_entropy(fwd.logits, &batch.labels)?;
    if plan.text_aux {
        let text_logits = model.head_logits(tape, Predictor::Text, fwd.text_fused, None)?;
        let text_ce = tape.cross_entropy(text_logits, &batch.labels)?;
        ce = tape.add(ce, text_ce)?;
    }
    let mut total = ce;
    let mut sparse_value = 0.0;
    for &m in &plan.sparse {
        let sp = model.mask_params(m).sparse_loss(tape, &model.store);
        sparse_value += tape.value(sp).item();
        let weighted = tape.scale(sp, model.config.alpha);
        total = tape.add(total, weighted)?;
    }
    let mut recon_value = 0.0;
    let trains_video = plan
        .trainable
        .iter()
        .any(|&id| model.store.name(id).starts_with("recon."));
    if trains_video {
        if let Some(rec) = model.recon_term(tape, &fwd)? {
            recon_value = tape.value(rec).item();
            total = tape.add(total, rec)?;
        }
    }
    let parts = LossParts {
        ce: tape.value(ce).item(),
        sparse: sparse_value,
        recon: recon_value,
        total: tape.value(total).item(),
    };
    Ok((total, parts, fwd.logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Epoch index counted across all stages.
    pub epoch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub ce: f64,
    pub sparse: f64,
    pub recon: f64,
    pub loss: f64,
    pub retained_text: f64,
    pub retained_video: f64,
    pub train_accuracy: f64,
    pub val_accuracy: BTreeMap<String, f64>,
    pub val_mean: Option<f64>,
    pub target_accuracy: BTreeMap<String, f64>,
    pub target_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub predictor: Predictor,
    pub trainable: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest mean validation accuracy (earliest on ties).
    pub best_val_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub target_at_best_val: Option<f64>,
    pub text_support: Vec<usize>,
    pub video_support: Vec<usize>,
    pub retained_text: f64,
    pub retained_video: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ModelConfig,
    pub roles: DomainRoles,
    pub stages: Vec<StageReport>,
    /// Final-parameter accuracy on validation and target samples.
    pub final_val: Evaluation,
    pub final_target: Evaluation,
    /// Trainer stream position when training ended.
    pub rng: RngState,
}

/// Seed and word position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Context handed to a step observer after every optimizer update.
pub struct StepInfo<'a> {
    pub stage: StageKind,
    pub plan: &'a StagePlan,
    pub epoch: usize,
    pub batch_index: usize,
    pub parts: LossParts,
    pub batch: &'a Batch,
}

pub type Observer<'o> = dyn FnMut(&StepInfo<'_>, &Model) -> Result<()> + 'o;

/// Trains a freshly initialized model.
pub fn train(dataset: &Dataset, config: &ModelConfig, roles: &DomainRoles) -> Result<(Model, TrainReport)> {
    train_observed(dataset, config, roles, &mut |_, _| Ok(()))
}

pub fn train_observed(
    dataset: &Dataset,
    config: &ModelConfig,
    roles: &DomainRoles,
    observer: &mut Observer<'_>,
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(config.clone())?;
    let report = train_model(&mut model, dataset, roles, observer)?;
    Ok((model, report))
}

/// Runs every stage on an existing model, in place.
pub fn train_model(
    model: &mut Model,
    dataset: &Dataset,
    roles: &DomainRoles,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let dims = dataset.validate(cfg.num_classes)?;
    cfg.check_dims(&dims)?;
    let split = Split::new(dataset, roles, cfg.val_fraction, cfg.seed)?;
    if split.train.is_empty() {
        return Err(Error::Data("no training samples in the source domains".into()));
    }
    let trainer_seed = cfg.seed.wrapping_add(1);
    let mut rng = ChaCha8Rng::seed_from_u64(trainer_seed);
    let val_all: Vec<usize> = split.val.values().flatten().copied().collect();
    let target_all: Vec<usize> = split.targets.values().flatten().copied().collect();

    let mut stages = Vec::new();
    let mut global_epoch = 0;
    for plan in plan_stages(model) {
        let mut adam = Adam::new(cfg.optimizer.clone())?;
        for m in [Modality::Text, Modality::Video] {
            let p = model.mask_params(m);
            adam.set_lr_scale(p.r, cfg.mask_lr_scale);
            adam.set_lr_scale(p.s, cfg.mask_lr_scale);
        }
        let mut records = Vec::new();
        for local_epoch in 0..plan.epochs {
            let temperature = cfg.temperature_at(global_epoch);
            let mut order = split.train.clone();
            order.shuffle(&mut rng);
            let n_batches = order.len().div_ceil(cfg.batch_size);
            let (mut sums, mut correct, mut seen) = (LossParts::default(), 0usize, 0usize);
            let mut last_lr = 0.0;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = dataset.batch(chunk)?;
                let progress = local_epoch as f64 + bi as f64 / n_batches as f64;
                last_lr = adam.effective_lr(progress);
                let mut tape = Tape::new();
                let (loss, parts, logits) = stage_loss(model, &plan, &mut tape, &batch, temperature, &mut rng)?;
                if !parts.total.is_finite() {
                    return Err(Error::Numerical {
                        epoch: global_epoch,
                        batch: bi,
                        lr: last_lr,
                        what: format!("{:?} stage loss is {}", plan.kind, parts.total),
                    });
                }
                let preds = argmax_rows(tape.value(logits));
                correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
                seen += batch.len();
                let grads = tape.backward(loss)?;
                let grads: Vec<_> = grads
                    .params()
                    .into_iter()
                    .filter(|(id, _)| plan.trainable.contains(id))
                    .collect();
                adam.step(&mut model.store, &plan.trainable, &grads, progress)?;
                let w = batch.len() as f64;
                sums.ce += parts.ce * w;
                sums.sparse += parts.sparse * w;
                sums.recon += parts.recon * w;
                sums.total += parts.total * w;
                observer(
                    &StepInfo {
                        stage: plan.kind,
                        plan: &plan,
                        epoch: global_epoch,
                        batch_index: bi,
                        parts,
                        batch: &batch,
                    },
                    model,
                )?;
            }
            let n = seen.max(1) as f64;
            let val = evaluate_indices(model, dataset, &val_all, plan.predictor, Ablation::None)?;
            let tgt = evaluate_indices(model, dataset, &target_all, plan.predictor, Ablation::None)?;
            records.push(EpochRecord {
                epoch: global_epoch,
                lr: last_lr,
                temperature,
                ce: sums.ce / n,
                sparse: sums.sparse / n,
                recon: sums.recon / n,
                loss: sums.total / n,
                retained_text: model.mask_state(Modality::Text).retained_fraction(),
                retained_video: model.mask_state(Modality::Video).retained_fraction(),
                train_accuracy: correct as f64 / n,
                val_accuracy: val.domains.iter().map(|(d, a)| (d.clone(), a.accuracy)).collect(),
                val_mean: val.mean_over(&roles.sources),
                target_accuracy: tgt.domains.iter().map(|(d, a)| (d.clone(), a.accuracy)).collect(),
                target_mean: tgt.mean_over(&roles.targets),
            });
            global_epoch += 1;
        }
        let best = records.iter().filter_map(|r| r.val_mean.map(|v| (r, v))).fold(
            None::<(&EpochRecord, f64)>,
            |acc, (r, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((r, v)),
            },
        );
        let text = model.mask_state(Modality::Text);
        let video = model.mask_state(Modality::Video);
        stages.push(StageReport {
            stage: plan.kind,
            predictor: plan.predictor,
            trainable: plan
                .trainable
                .iter()
                .map(|&id| model.store.name(id).to_string())
                .collect(),
            best_val_epoch: best.map(|(r, _)| r.epoch),
            best_val_accuracy: best.map(|(_, v)| v),
            target_at_best_val: best.and_then(|(r, _)| r.target_mean),
            epochs: records,
            text_support: text.support(),
            video_support: video.support(),
            retained_text: text.retained_fraction(),
            retained_video: video.retained_fraction(),
        });
    }
    let final_val = evaluate_indices(model, dataset, &val_all, model.final_predictor(), Ablation::None)?;
    let final_target = evaluate_indices(model, dataset, &target_all, model.final_predictor(), Ablation::None)?;
    Ok(TrainReport {
        config: cfg,
        roles: roles.clone(),
        stages,
        final_val,
        final_target,
        rng: RngState::of(trainer_seed, &rng),
    })
}
