//! Synthetic multimodal domain-shift data with known causal structure.
//!
//! Per sample, a latent confounder `U` drives some invariant features and
//! some spurious features. The label is a discretized score of the
//! invariant features plus independent noise, so invariant features are
//! the only parents of the label. Spurious features are children of the
//! label (with a per-domain sign and strength) and of one invariant
//! partner feature, so their correlation with the label changes across
//! domains while intervening on them never changes the label. Remaining
//! coordinates are i.i.d. noise. Feature vectors are tiled into tokens or
//! frames with small jitter.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::mask::Modality;

/// Feature roles for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub dim: usize,
    pub invariant: Vec<usize>,
    pub spurious: Vec<usize>,
    /// Label-score weight of each invariant feature, aligned with `invariant`.
    pub label_weights: Vec<f64>,
}

impl ModalitySpec {
    /// Places `n_invariant` and `n_spurious` roles at positions drawn by a
    /// seeded shuffle of `0..dim`. All invariant features share `weight`.
    pub fn random_layout(
        dim: usize,
        n_invariant: usize,
        n_spurious: usize,
        weight: f64,
        layout_seed: u64,
    ) -> Result<Self> {
        if n_invariant + n_spurious > dim {
            return Err(Error::Config(format!(
                "{n_invariant} invariant + {n_spurious} spurious features exceed width {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let mut order: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut invariant = order[..n_invariant].to_vec();
        let mut spurious = order[n_invariant..n_invariant + n_spurious].to_vec();
        invariant.sort_unstable();
        spurious.sort_unstable();
        Ok(ModalitySpec {
            dim,
            label_weights: vec![weight; invariant.len()],
            invariant,
            spurious,
        })
    }

    pub fn noise(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.invariant.iter().chain(&self.spurious).copied().collect();
        (0..self.dim).filter(|i| !used.contains(i)).collect()
    }

    fn validate(&self, modality: Modality) -> Result<()> {
        let inv: BTreeSet<usize> = self.invariant.iter().copied().collect();
        let spu: BTreeSet<usize> = self.spurious.iter().copied().collect();
        if inv.len() != self.invariant.len() || spu.len() != self.spurious.len() {
            return Err(Error::Config(format!("{modality}: repeated support index")));
        }
        if let Some(i) = inv.intersection(&spu).next() {
            return Err(Error::Config(format!(
                "{modality}: feature {i} is both invariant and spurious"
            )));
        }
        if let Some(i) = inv.iter().chain(&spu).find(|&&i| i >= self.dim) {
            return Err(Error::Config(format!(
                "{modality}: support index {i} outside 0..{}",
                self.dim
            )));
        }
        if self.label_weights.len() != self.invariant.len() {
            return Err(Error::Config(format!(
                "{modality}: {} label weights for {} invariant features",
                self.label_weights.len(),
                self.invariant.len()
            )));
        }
        if !self.spurious.is_empty() && self.invariant.is_empty() {
            return Err(Error::Config(format!(
                "{modality}: spurious features need at least one invariant partner"
            )));
        }
        Ok(())
    }
}

/// Ground-truth generative structure shared by all domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalSpec {
    pub text: ModalitySpec,
    pub video: ModalitySpec,
    pub num_classes: usize,
    /// Width of the latent confounder `U`.
    pub confounder_dim: usize,
    /// Loading of `U` on invariant and spurious features.
    pub confounder_scale: f64,
    /// Scale of the label-score noise.
    pub label_noise: f64,
    /// Weight of the invariant partner in each spurious feature.
    pub spurious_edge: f64,
    /// Pass invariant features through `tanh` before scoring.
    pub nonlinear: bool,
    pub text_tokens: usize,
    pub video_frames: usize,
    /// Per-token Gaussian jitter.
    pub jitter: f64,
}

/// One domain: sample count and the sign/strength of its spurious link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub n: usize,
    pub spurious_sign: f64,
    pub spurious_strength: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config(format!("domain `{}` needs n >= 1", self.id)));
        }
        if self.spurious_sign != 1.0 && self.spurious_sign != -1.0 {
            return Err(Error::Config(format!(
                "domain `{}`: spurious sign must be +1 or -1",
                self.id
            )));
        }
        if !(self.spurious_strength >= 0.0) {
            return Err(Error::Config(format!(
                "domain `{}`: spurious strength must be nonnegative",
                self.id
            )));
        }
        Ok(())
    }
}

/// Structural record of one sample: exogenous draws plus derived values.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalSample {
    pub confounder: Vec<f64>,
    pub text_exogenous: Vec<f64>,
    pub video_exogenous: Vec<f64>,
    pub label_exogenous: f64,
    pub text: Vec<f64>,
    pub video: Vec<f64>,
    pub score: f64,
    pub label: usize,
    /// Score cut points the label was discretized with.
    pub thresholds: Vec<f64>,
    /// Do-interventions in force, as `(modality, index, value)`.
    pub interventions: Vec<(Modality, usize, f64)>,
}

impl CausalSpec {
    pub fn modality(&self, m: Modality) -> &ModalitySpec {
        match m {
            Modality::Text => &self.text,
            Modality::Video => &self.video,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate(Modality::Text)?;
        self.video.validate(Modality::Video)?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.text_tokens == 0 || self.video_frames == 0 {
            return Err(Error::Config("token and frame counts must be positive".into()));
        }
        if self.text.dim == 0 || self.video.dim == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        for (name, v) in [
            ("confounder_scale", self.confounder_scale),
            ("label_noise", self.label_noise),
            ("spurious_edge", self.spurious_edge),
            ("jitter", self.jitter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Ascending score cut points giving equiprobable classes.
    pub fn thresholds(&self) -> Vec<f64> {
        let k = self.num_classes;
        if self.nonlinear {
            // No closed form for the tanh score: fixed-seed Monte Carlo.
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7e57);
            let mut scores: Vec<f64> = (0..200_000)
                .map(|_| {
                    let u = normals(&mut rng, self.confounder_dim);
                    let te = normals(&mut rng, self.text.dim);
                    let ve = normals(&mut rng, self.video.dim);
                    let eps: f64 = rng.sample(StandardNormal);
                    let (t, v) = (
                        self.invariant_values(Modality::Text, &u, &te, &[]),
                        self.invariant_values(Modality::Video, &u, &ve, &[]),
                    );
                    self.score(&t, &v, eps)
                })
                .collect();
            scores.sort_by(f64::total_cmp);
            (1..k).map(|q| scores[q * scores.len() / k]).collect()
        } else {
            let sd = self.score_variance().sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (1..k).map(|q| sd * normal.inverse_cdf(q as f64 / k as f64)).collect()
        }
    }

    /// Variance of the linear label score.
    pub fn score_variance(&self) -> f64 {
        let lam = self.confounder_scale;
        let mut per_u = vec![0.0; self.confounder_dim];
        let mut own = 0.0;
        for spec in [&self.text, &self.video] {
            for (q, w) in spec.label_weights.iter().enumerate() {
                if self.confounder_dim > 0 {
                    per_u[q % self.confounder_dim] += w;
                }
                own += w * w;
            }
        }
        per_u.iter().map(|s| lam * lam * s * s).sum::<f64>() + own + self.label_noise.powi(2)
    }

    /// Invariant feature values, in `invariant` order.
    fn invariant_values(&self, m: Modality, u: &[f64], exo: &[f64], overrides: &[(Modality, usize, f64)]) -> Vec<f64> {
        let spec = self.modality(m);
        spec.invariant
            .iter()
            .enumerate()
            .map(|(q, &idx)| {
                override_for(overrides, m, idx).unwrap_or_else(|| {
                    let c = if self.confounder_dim > 0 {
                        self.confounder_scale * u[q % self.confounder_dim]
                    } else {
                        0.0
                    };
                    c + exo[idx]
                })
            })
            .collect()
    }

    fn score(&self, text_inv: &[f64], video_inv: &[f64], eps: f64) -> f64 {
        let f = |x: f64| if self.nonlinear { x.tanh() } else { x };
        let t: f64 = text_inv
            .iter()
            .zip(&self.text.label_weights)
            .map(|(x, w)| w * f(*x))
            .sum();
        let v: f64 = video_inv
            .iter()
            .zip(&self.video.label_weights)
            .map(|(x, w)| w * f(*x))
            .sum();
        t + v + self.label_noise * eps
    }

    /// Ordinal label code in `[-1, 1]`.
    fn label_code(&self, label: usize) -> f64 {
        2.0 * label as f64 / (self.num_classes - 1) as f64 - 1.0
    }

    /// Evaluates the structural equations from exogenous draws.
    #[allow(clippy::too_many_arguments)]
    fn realize(
        &self,
        domain: &DomainSpec,
        thresholds: &[f64],
        confounder: Vec<f64>,
        text_exogenous: Vec<f64>,
        video_exogenous: Vec<f64>,
        label_exogenous: f64,
        interventions: Vec<(Modality, usize, f64)>,
    ) -> CausalSample {
        let t_inv = self.invariant_values(Modality::Text, &confounder, &text_exogenous, &interventions);
        let v_inv = self.invariant_values(Modality::Video, &confounder, &video_exogenous, &interventions);
        let score = self.score(&t_inv, &v_inv, label_exogenous);
        let label = thresholds.iter().filter(|&&t| score >= t).count();
        let code = self.label_code(label);

        let build = |m: Modality, inv: &[f64], exo: &[f64]| {
            let spec = self.modality(m);
            let mut x = exo.to_vec();
            for (q, &idx) in spec.invariant.iter().enumerate() {
                x[idx] = inv[q];
            }
            for (q, &idx) in spec.spurious.iter().enumerate() {
                let partner = inv[q % inv.len()];
                let c = if self.confounder_dim > 0 {
                    self.confounder_scale * confounder[q % self.confounder_dim]
                } else {
                    0.0
                };
                x[idx] = c
                    + self.spurious_edge * partner
                    + domain.spurious_sign * domain.spurious_strength * code
                    + exo[idx];
            }
            for &(om, idx, value) in &interventions {
                if om == m && idx < x.len() {
                    x[idx] = value;
                }
            }
            x
        };
        let text = build(Modality::Text, &t_inv, &text_exogenous);
        let video = build(Modality::Video, &v_inv, &video_exogenous);
        CausalSample {
            confounder,
            text_exogenous,
            video_exogenous,
            label_exogenous,
            text,
            video,
            score,
            label,
            thresholds: thresholds.to_vec(),
            interventions,
        }
    }

    /// Draws one structural sample.
    pub fn draw(&self, domain: &DomainSpec, thresholds: &[f64], rng: &mut impl Rng) -> CausalSample {
        let u = normals(rng, self.confounder_dim);
        let te = normals(rng, self.text.dim);
        let ve = normals(rng, self.video.dim);
        let eps: f64 = rng.sample(StandardNormal);
        self.realize(domain, thresholds, u, te, ve, eps, Vec::new())
    }
}

fn override_for(overrides: &[(Modality, usize, f64)], m: Modality, idx: usize) -> Option<f64> {
    overrides
        .iter()
        .rev()
        .find(|(om, oi, _)| *om == m && *oi == idx)
        .map(|(_, _, v)| *v)
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Sets one feature by force, severs its incoming edges and recomputes its
/// descendants (and the label) with the sample's exogenous draws held fixed.
pub fn intervene(
    causal: &CausalSpec,
    domain: &DomainSpec,
    sample: &CausalSample,
    modality: Modality,
    index: usize,
    value: f64,
) -> Result<CausalSample> {
    if index >= causal.modality(modality).dim {
        return Err(Error::Input(format!(
            "{modality} feature {index} outside 0..{}",
            causal.modality(modality).dim
        )));
    }
    let mut interventions = sample.interventions.clone();
    interventions.push((modality, index, value));
    Ok(causal.realize(
        domain,
        &sample.thresholds,
        sample.confounder.clone(),
        sample.text_exogenous.clone(),
        sample.video_exogenous.clone(),
        sample.label_exogenous,
        interventions,
    ))
}

/// Draws `domain.n` structural samples from the domain's own seed.
pub fn generate_causal(causal: &CausalSpec, domain: &DomainSpec) -> Result<Vec<CausalSample>> {
    causal.validate()?;
    domain.validate()?;
    let thresholds = causal.thresholds();
    let mut rng = ChaCha8Rng::seed_from_u64(domain.seed);
    Ok((0..domain.n)
        .map(|_| causal.draw(domain, &thresholds, &mut rng))
        .collect())
}

fn tile(features: &[f64], count: usize, jitter: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            features
                .iter()
                .map(|&x| x + jitter * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Generates the tokenized dataset for every domain, in order.
pub fn generate_dataset(causal: &CausalSpec, domains: &[DomainSpec]) -> Result<Dataset> {
    causal.validate()?;
    let mut ids = BTreeSet::new();
    for d in domains {
        d.validate()?;
        if !ids.insert(d.id.as_str()) {
            return Err(Error::Config(format!("duplicate domain `{}`", d.id)));
        }
    }
    let thresholds = causal.thresholds();
    let mut samples = Vec::new();
    for d in domains {
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        let structural: Vec<CausalSample> = (0..d.n).map(|_| causal.draw(d, &thresholds, &mut rng)).collect();
        for (i, cs) in structural.into_iter().enumerate() {
            samples.push(Sample {
                id: format!("{}-{i}", d.id),
                domain: d.id.clone(),
                label: cs.label,
                text: tile(&cs.text, causal.text_tokens, causal.jitter, &mut rng),
                video: tile(&cs.video, causal.video_frames, causal.jitter, &mut rng),
            });
        }
    }
    Ok(Dataset::new(samples))
}

/// Desk-scale task: 64 features per modality (8 invariant, 8 spurious,
/// 48 noise), a stronger label signal in text than in video, two source
/// domains whose spurious links have opposite signs and a target domain
/// with a strong flipped link.
pub fn default_task(layout_seed: u64, n: usize) -> (CausalSpec, Vec<DomainSpec>) {
    let causal = CausalSpec {
        text: ModalitySpec::random_layout(64, 8, 8, 1.0, layout_seed).expect("fits"),
        video: ModalitySpec::random_layout(64, 8, 8, 0.5, layout_seed.wrapping_add(1)).expect("fits"),
        num_classes: 3,
        confounder_dim: 4,
        confounder_scale: 0.5,
        label_noise: 0.3,
        spurious_edge: 0.0,
        nonlinear: false,
        text_tokens: 4,
        video_frames: 4,
        jitter: 0.05,
    };
    let domain = |id: &str, sign: f64, strength: f64, seed: u64| DomainSpec {
        id: id.into(),
        n,
        spurious_sign: sign,
        spurious_strength: strength,
        seed,
    };
    let domains = vec![
        domain("src_a", 1.0, 1.0, 101),
        domain("src_b", -1.0, 0.9, 202),
        // The target flips src_a's sign at several times its strength.
        domain("tgt", -1.0, 4.0, 303),
    ];
    (causal, domains)
}

/// Indices of the label's parents in one modality.
pub fn ground_truth_support(causal: &CausalSpec, modality: Modality) -> Vec<usize> {
    causal.modality(modality).invariant.clone()
}

/// Sidecar describing the generating structure of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub causal: CausalSpec,
    pub domains: Vec<DomainSpec>,
    pub thresholds: Vec<f64>,
    pub text: Supports,
    pub video: Supports,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supports {
    pub invariant: Vec<usize>,
    pub spurious: Vec<usize>,
    pub noise: Vec<usize>,
}

impl GroundTruth {
    pub fn new(causal: &CausalSpec, domains: &[DomainSpec]) -> Self {
        let sup = |m: &ModalitySpec| Supports {
            invariant: m.invariant.clone(),
            spurious: m.spurious.clone(),
            noise: m.noise(),
        };
        GroundTruth {
            causal: causal.clone(),
            domains: domains.to_vec(),
            thresholds: causal.thresholds(),
            text: sup(&causal.text),
            video: sup(&causal.video),
        }
    }

    pub fn supports(&self, m: Modality) -> &Supports {
        match m {
            Modality::Text => &self.text,
            Modality::Video => &self.video,
        }
    }
}
