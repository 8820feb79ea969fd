//! End-to-end model: per-modality encoders, learnable masks, token fusion,
//! classifier heads and the keyframe stage.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Dims};
use crate::error::{Error, Result};
use crate::keyframe::{recon_loss, KeyframeHead, KeyframeOutput, SampleMode};
use crate::mask::{apply_mask, token_fuse, MaskParams, MaskState, Modality};
use crate::nn::{Gru, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;

/// Which modality is trained first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Order {
    /// Text stage, then video conditioned on frozen text features.
    #[serde(rename = "t2v")]
    TextFirst,
    /// Video stage, then text conditioned on frozen video features.
    #[serde(rename = "v2t")]
    VideoFirst,
    /// Both objectives optimized together.
    #[serde(rename = "joint")]
    Joint,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::TextFirst => "t2v",
            Order::VideoFirst => "v2t",
            Order::Joint => "joint",
        }
    }

    /// Modality whose fused vector comes first in the fusion head input.
    pub fn conditioning(self) -> Modality {
        match self {
            Order::VideoFirst => Modality::Video,
            _ => Modality::Text,
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Order::TextFirst),
            "v2t" => Ok(Order::VideoFirst),
            "joint" => Ok(Order::Joint),
            _ => Err(Error::Config(format!(
                "unknown order `{s}` (expected t2v, v2t or joint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub video_dim: usize,
    pub text_tokens: usize,
    pub video_frames: usize,
    pub num_classes: usize,
    pub heads: usize,
    /// Weight of the sparsity regularizer.
    pub alpha: f64,
    pub order: Order,
    /// Total epoch budget, split evenly between the two stages.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Learning-rate multiplier for the mask magnitudes and thresholds.
    pub mask_lr_scale: f64,
    pub seed: u64,
    pub keyframe: bool,
    pub stride: usize,
    /// Half-width of the uniform init of mask magnitudes.
    pub r_init: f64,
    /// Lower bound on the initial `|r|`.
    pub r_init_floor: f64,
    /// Initial pruning threshold.
    pub s_init: f64,
    /// Keep training the first modality's parameters in the second stage.
    pub unfreeze: bool,
    pub temperature: f64,
    pub temperature_decay: f64,
    pub temperature_floor: f64,
    /// Fraction of each source domain held out for validation.
    pub val_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_dim: 64,
            video_dim: 64,
            text_tokens: 4,
            video_frames: 4,
            num_classes: 3,
            heads: 4,
            alpha: 3e-2,
            order: Order::TextFirst,
            epochs: 100,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            mask_lr_scale: 0.1,
            seed: 0,
            keyframe: true,
            stride: 1,
            r_init: 0.5,
            r_init_floor: 0.1,
            s_init: 0.05,
            unfreeze: false,
            temperature: 1.0,
            temperature_decay: 0.97,
            temperature_floor: 0.1,
            val_fraction: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if [self.text_dim, self.video_dim, self.text_tokens, self.video_frames].contains(&0) {
            return bad("dims and token counts must be positive".into());
        }
        if self.heads == 0 || !self.text_dim.is_multiple_of(self.heads) || !self.video_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "feature widths {} and {} must be divisible by {} heads",
                self.text_dim, self.video_dim, self.heads
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.stride == 0 {
            return bad("keyframe stride must be at least 1".into());
        }
        if !(self.optimizer.lr > 0.0) || !self.optimizer.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if !(self.temperature > 0.0) || !(self.temperature_floor > 0.0) || !(self.temperature_decay > 0.0) {
            return bad("temperature settings must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)".into());
        }
        if !(self.r_init > 0.0) || !self.s_init.is_finite() {
            return bad("r_init must be positive and s_init finite".into());
        }
        if !(0.0..self.r_init).contains(&self.r_init_floor) {
            return bad(format!(
                "r_init_floor must be in [0, r_init), got {}",
                self.r_init_floor
            ));
        }
        if !(self.mask_lr_scale > 0.0) || !self.mask_lr_scale.is_finite() {
            return bad(format!("mask_lr_scale must be positive, got {}", self.mask_lr_scale));
        }
        Ok(())
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text_dim,
            Modality::Video => self.video_dim,
        }
    }

    /// Checks a dataset's shapes against the configured ones.
    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        let want = Dims {
            text_tokens: self.text_tokens,
            text_dim: self.text_dim,
            video_frames: self.video_frames,
            video_dim: self.video_dim,
        };
        if *dims != want {
            return Err(Error::Input(format!(
                "data dims {dims:?} do not match model dims {want:?}"
            )));
        }
        Ok(())
    }

    /// Epochs given to each stage.
    pub fn stage_epochs(&self) -> (usize, usize) {
        match self.order {
            Order::Joint => (self.epochs, 0),
            _ => (self.epochs / 2, self.epochs - self.epochs / 2),
        }
    }

    /// Sampling temperature at a given epoch.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        (self.temperature * self.temperature_decay.powi(epoch as i32)).max(self.temperature_floor)
    }
}

/// Per-feature affine projection followed by residual self-attention
/// whose values are not mixed across coordinates, so hidden coordinate `j`
/// stays tied to input feature `j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub scale: ParamId,
    pub bias: ParamId,
    pub attention: MultiHeadAttention,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let scale = store.insert(format!("{name}.in_scale"), Tensor::full(&[dim], 1.0))?;
        let bias = store.insert(format!("{name}.in_bias"), Tensor::zeros(&[dim]))?;
        let attention = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, false)?;
        Ok(Encoder { scale, bias, attention })
    }

    /// `[B, tau, d] -> [B, tau, d]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let scale = tape.param(store, self.scale);
        let bias = tape.param(store, self.bias);
        let h = tape.mul_last(x, scale)?;
        let h = tape.add_bias(h, bias)?;
        let mixed = self.attention.forward(tape, store, h, h, h)?;
        tape.add(h, mixed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parts {
    pub text_encoder: Encoder,
    pub video_encoder: Encoder,
    pub text_mask: MaskParams,
    pub video_mask: MaskParams,
    pub text_head: Linear,
    pub video_head: Linear,
    /// Input is `[conditioning fused; other fused]`.
    pub fusion_head: Linear,
    pub keyframe: KeyframeHead,
    pub recon: Gru,
}

/// Which classifier produces the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Text,
    Video,
    Fusion,
}

/// Evaluation-time interventions on the fused features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Fused vectors replaced by standard Gaussian noise.
    AddNoise,
    /// Masks replaced by `r * (1 - p)`, keeping only the removed features.
    UsingRemoved,
}

/// Forward-pass intermediates for one batch.
pub struct Forward {
    pub logits: Var,
    pub text_hidden: Option<Var>,
    pub video_hidden: Option<Var>,
    pub text_mask: Option<Var>,
    pub video_mask: Option<Var>,
    pub text_fused: Option<Var>,
    pub video_fused: Option<Var>,
    pub keyframe: Option<KeyframeOutput>,
    /// Raw frames fed to the keyframe stage, for the reconstruction loss.
    pub frames: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub predictor: Predictor,
    pub mode: SampleMode,
    pub temperature: f64,
    pub ablation: Ablation,
    /// Detach this modality's fused vector from the graph.
    pub detach: Option<Modality>,
}

impl ForwardOptions {
    pub fn eval(predictor: Predictor) -> Self {
        ForwardOptions {
            predictor,
            mode: SampleMode::Eval,
            temperature: 1.0,
            ablation: Ablation::None,
            detach: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub parts: Parts,
}

impl Model {
    /// Builds and initializes every parameter from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (dt, dv, k) = (config.text_dim, config.video_dim, config.num_classes);
        let text_encoder = Encoder::new(&mut store, &mut rng, "text.encoder", dt, config.heads)?;
        let video_encoder = Encoder::new(&mut store, &mut rng, "video.encoder", dv, config.heads)?;
        let r_range = (config.r_init_floor, config.r_init);
        let text_mask = MaskParams::new(&mut store, &mut rng, Modality::Text, dt, r_range, config.s_init)?;
        let video_mask = MaskParams::new(&mut store, &mut rng, Modality::Video, dv, r_range, config.s_init)?;
        let text_head = Linear::new(&mut store, &mut rng, "head.text", dt, k)?;
        let video_head = Linear::new(&mut store, &mut rng, "head.video", dv, k)?;
        let fusion_head = Linear::new(&mut store, &mut rng, "head.fusion", dt + dv, k)?;
        let keyframe = KeyframeHead::new(&mut store, &mut rng, "keyframe", dv, config.heads, config.stride)?;
        let recon = Gru::new(&mut store, &mut rng, "recon", dv, dv)?;
        Ok(Model {
            config,
            store,
            parts: Parts {
                text_encoder,
                video_encoder,
                text_mask,
                video_mask,
                text_head,
                video_head,
                fusion_head,
                keyframe,
                recon,
            },
        })
    }

    pub fn mask_params(&self, m: Modality) -> &MaskParams {
        match m {
            Modality::Text => &self.parts.text_mask,
            Modality::Video => &self.parts.video_mask,
        }
    }

    pub fn mask_state(&self, m: Modality) -> MaskState {
        self.mask_params(m).state(&self.store)
    }

    /// Classifier used for final predictions.
    pub fn final_predictor(&self) -> Predictor {
        Predictor::Fusion
    }

    fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Text => &self.parts.text_encoder,
            Modality::Video => &self.parts.video_encoder,
        }
    }

    /// Hidden token representations `[B, tau, d]`. Video frames pass
    /// through the keyframe stage first when it is enabled.
    pub fn encode(
        &self,
        tape: &mut Tape,
        m: Modality,
        x: Var,
        mode: SampleMode,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(Var, Option<KeyframeOutput>)> {
        let s = tape.shape(x);
        let (tokens, dim) = match m {
            Modality::Text => (self.config.text_tokens, self.config.text_dim),
            Modality::Video => (self.config.video_frames, self.config.video_dim),
        };
        if s.len() != 3 || s[1] != tokens || s[2] != dim {
            return Err(Error::Input(format!(
                "{m} input must be [B, {tokens}, {dim}], got {s:?}"
            )));
        }
        if m == Modality::Video && self.config.keyframe {
            let kf = self
                .parts
                .keyframe
                .forward(tape, &self.store, x, mode, temperature, rng)?;
            let h = self.encoder(m).forward(tape, &self.store, kf.kept)?;
            Ok((h, Some(kf)))
        } else {
            Ok((self.encoder(m).forward(tape, &self.store, x)?, None))
        }
    }

    /// Mask vector used for a modality under an ablation.
    pub fn mask_vector(&self, tape: &mut Tape, m: Modality, ablation: Ablation) -> Result<Var> {
        let params = self.mask_params(m);
        match ablation {
            Ablation::UsingRemoved => {
                let state = params.state(&self.store);
                let v = state.r.iter().zip(state.binary()).map(|(r, p)| r * (1.0 - p)).collect();
                Ok(tape.leaf(Tensor::vector(v)))
            }
            _ => params.vector(tape, &self.store),
        }
    }

    /// Masks hidden tokens and fuses them into one vector per sample.
    pub fn fuse(&self, tape: &mut Tape, hidden: Var, mask: Var) -> Result<Var> {
        let masked = apply_mask(tape, hidden, mask)?;
        token_fuse(tape, masked, mask)
    }

    /// Logits from fused vectors.
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        predictor: Predictor,
        text: Option<Var>,
        video: Option<Var>,
    ) -> Result<Var> {
        let need =
            |v: Option<Var>, what: &str| v.ok_or_else(|| Error::State(format!("{what} fused vector is missing")));
        match predictor {
            Predictor::Text => self.parts.text_head.forward(tape, &self.store, need(text, "text")?),
            Predictor::Video => self.parts.video_head.forward(tape, &self.store, need(video, "video")?),
            Predictor::Fusion => {
                let (t, v) = (need(text, "text")?, need(video, "video")?);
                let joint = match self.config.order.conditioning() {
                    Modality::Text => tape.concat_last(t, v)?,
                    Modality::Video => tape.concat_last(v, t)?,
                };
                self.parts.fusion_head.forward(tape, &self.store, joint)
            }
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: &ForwardOptions,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        let (mut text_hidden, mut video_hidden, mut text_mask, mut video_mask) = (None, None, None, None);
        let (mut text_fused, mut video_fused, mut keyframe, mut frames) = (None, None, None, None);
        let needed: &[Modality] = match opts.predictor {
            Predictor::Text => &[Modality::Text],
            Predictor::Video => &[Modality::Video],
            Predictor::Fusion => &[Modality::Text, Modality::Video],
        };
        for &m in needed {
            let raw = match m {
                Modality::Text => batch.text.clone(),
                Modality::Video => batch.video.clone(),
            };
            let x = tape.leaf(raw);
            let (hidden, kf) = self.encode(tape, m, x, opts.mode, opts.temperature, rng)?;
            let mask = self.mask_vector(tape, m, opts.ablation)?;
            let mut fused = self.fuse(tape, hidden, mask)?;
            if opts.ablation == Ablation::AddNoise {
                let shape = tape.shape(fused).to_vec();
                let n: usize = shape.iter().product();
                let noise = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                fused = tape.leaf(Tensor::new(shape, noise)?);
            }
            if opts.detach == Some(m) {
                fused = tape.detach(fused);
            }
            match m {
                Modality::Text => {
                    text_hidden = Some(hidden);
                    text_mask = Some(mask);
                    text_fused = Some(fused);
                }
                Modality::Video => {
                    video_hidden = Some(hidden);
                    video_mask = Some(mask);
                    video_fused = Some(fused);
                    frames = Some(x);
                    keyframe = kf;
                }
            }
        }
        let logits = self.head_logits(tape, opts.predictor, text_fused, video_fused)?;
        Ok(Forward {
            logits,
            text_hidden,
            video_hidden,
            text_mask,
            video_mask,
            text_fused,
            video_fused,
            keyframe,
            frames,
        })
    }

    /// Reconstruction penalty for the keyframe stage of a forward pass;
    /// `None` when the stage is disabled.
    pub fn recon_term(&self, tape: &mut Tape, fwd: &Forward) -> Result<Option<Var>> {
        match (&fwd.keyframe, fwd.frames) {
            (Some(kf), Some(frames)) => Ok(Some(recon_loss(tape, &self.store, &self.parts.recon, kf.kept, frames)?)),
            _ => Ok(None),
        }
    }

    /// Argmax predictions (ties go to the lowest class index).
    pub fn predict(
        &self,
        batch: &Batch,
        predictor: Predictor,
        ablation: Ablation,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            ablation,
            ..ForwardOptions::eval(predictor)
        };
        let fwd = self.forward(&mut tape, batch, &opts, rng)?;
        Ok(argmax_rows(tape.value(fwd.logits)))
    }

    /// Per-sample token-mean of the masked hidden features `[B, d]`, or of
    /// the raw inputs when `raw` is set.
    pub fn token_mean_features(&self, batch: &Batch, m: Modality, raw: bool) -> Result<Tensor> {
        let x = match m {
            Modality::Text => &batch.text,
            Modality::Video => &batch.video,
        };
        let source = if raw {
            x.clone()
        } else {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            let leaf = tape.leaf(x.clone());
            let (hidden, _) = self.encode(&mut tape, m, leaf, SampleMode::Eval, 1.0, &mut rng)?;
            let mask = self.mask_vector(&mut tape, m, Ablation::None)?;
            let masked = apply_mask(&mut tape, hidden, mask)?;
            tape.value(masked).clone()
        };
        let s = source.shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..t {
                let row = &source.data()[(i * t + j) * d..(i * t + j + 1) * d];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += v / t as f64;
                }
            }
        }
        Tensor::new(vec![b, d], out)
    }

    /// Parameter ids whose names start with any of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store.ids_with_prefix(prefixes)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            text_dim: 4,
            video_dim: 4,
            text_tokens: 2,
            video_frames: 3,
            heads: 2,
            epochs: 0,
            ..ModelConfig::default()
        }
    }

    fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize| (0..n).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        Batch {
            ids: (0..b).map(|i| i.to_string()).collect(),
            domains: vec!["d".into(); b],
            labels: (0..b).map(|i| i % cfg.num_classes).collect(),
            text: Tensor::new(
                vec![b, cfg.text_tokens, cfg.text_dim],
                gen(b * cfg.text_tokens * cfg.text_dim),
            )
            .unwrap(),
            video: Tensor::new(
                vec![b, cfg.video_frames, cfg.video_dim],
                gen(b * cfg.video_frames * cfg.video_dim),
            )
            .unwrap(),
        }
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone()).unwrap();
        for id in model.params_with_prefix(&["head."]) {
            let shape = model.store.get(id).shape().to_vec();
            model.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let batch = tiny_batch(&cfg, 3, 1);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [Predictor::Text, Predictor::Video, Predictor::Fusion] {
            let fwd = model
                .forward(&mut tape, &batch, &ForwardOptions::eval(p), &mut rng)
                .unwrap();
            let probs = tape.softmax_last(fwd.logits);
            for v in tape.value(probs).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fusion_concatenates_conditioning_first() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone()).unwrap();
        // Only the video half of the fusion weight is nonzero.
        let w = model.parts.fusion_head.weight;
        let mut data = vec![0.0; 8 * 3];
        for row in 4..8 {
            data[row * 3] = 1.0;
        }
        model.store.set(w, Tensor::new(vec![8, 3], data).unwrap()).unwrap();
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let v = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let logits = model
            .head_logits(&mut tape, Predictor::Fusion, Some(t), Some(v))
            .unwrap();
        assert_eq!(tape.value(logits).data(), &[10.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_conditioning_vector_is_a_state_error() {
        let model = Model::new(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[1, 4]));
        let err = model
            .head_logits(&mut tape, Predictor::Fusion, None, Some(v))
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn wrong_input_dims_are_rejected() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone()).unwrap();
        let mut other = cfg.clone();
        other.text_dim = 6;
        other.heads = 2;
        let batch = tiny_batch(&other, 2, 3);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = model
            .forward(&mut tape, &batch, &ForwardOptions::eval(Predictor::Text), &mut rng)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config()).unwrap();
        let b = Model::new(tiny_config()).unwrap();
        let pa: Vec<_> = a.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let pb: Vec<_> = b.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn order_round_trips_through_strings() {
        for o in [Order::TextFirst, Order::VideoFirst, Order::Joint] {
            assert_eq!(o.as_str().parse::<Order>().unwrap(), o);
        }
        assert!("tv".parse::<Order>().is_err());
    }
}
