//! Keyframe-aware frame masking.
//!
//! Each frame gets a local temporal-difference embedding (windowed average
//! with replicate padding, minus the frame) and a global one (self-attention
//! over all frames). An MLP maps the pair to drop/keep logits; a decision
//! vector is sampled from them and dropped frames are zeroed. A GRU
//! reconstruction penalty keeps the thinned sequence close to the original.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Gru, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

/// How decisions are drawn from the keep probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Straight-through Gumbel sampling.
    Train,
    /// Deterministic argmax.
    Eval,
}

/// Local difference embedding for `[T, d]` or `[B, T, d]` frames.
///
/// Row `i` is `(sum_{j=i-k..=i} x_j + sum_{j=i+1..=i+k} x_j) / 2k - x_i`,
/// where out-of-range indices clamp to the first or last frame.
pub fn local_difference(frames: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Config("keyframe stride must be at least 1".into()));
    }
    let s = frames.shape();
    let (batch, t, d) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape("local_difference", format!("{s:?}"))),
    };
    if t == 0 {
        return Err(Error::Input("local difference needs at least one frame".into()));
    }
    let k = stride as isize;
    let scale = 1.0 / (2 * stride) as f64;
    let data = frames.data();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let frame = |j: isize| {
            let j = j.clamp(0, t as isize - 1) as usize;
            &data[(b * t + j) * d..(b * t + j + 1) * d]
        };
        for i in 0..t as isize {
            let row = &mut out[(b * t + i as usize) * d..(b * t + i as usize + 1) * d];
            for j in (i - k)..=(i + k) {
                for (o, v) in row.iter_mut().zip(frame(j)) {
                    *o += v;
                }
            }
            for (o, v) in row.iter_mut().zip(frame(i)) {
                *o = *o * scale - v;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Standard Gumbel draws, one per element of `shape`.
pub fn gumbel_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Hard keep decisions from `scores[..., T, 2]` (index 0 = drop,
/// index 1 = keep). A frame is kept when its keep score is strictly larger.
/// Rows with no kept frame keep the frame with the highest keep
/// probability `probs[..., 1]` (lowest index on ties).
fn hard_decisions(scores: &Tensor, probs: &Tensor, frames: usize) -> Vec<f64> {
    let sd = scores.data();
    let pd = probs.data();
    let rows = sd.len() / 2;
    let mut out: Vec<f64> = (0..rows)
        .map(|i| if sd[2 * i + 1] > sd[2 * i] { 1.0 } else { 0.0 })
        .collect();
    for (b, video) in out.chunks_mut(frames).enumerate() {
        if video.iter().all(|&v| v == 0.0) {
            let mut best = 0;
            for j in 1..frames {
                if pd[2 * (b * frames + j) + 1] > pd[2 * (b * frames + best) + 1] {
                    best = j;
                }
            }
            video[best] = 1.0;
        }
    }
    out
}

/// Samples a decision vector from per-frame `[drop, keep]` probabilities
/// (`[T, 2]` or `[B, T, 2]`). Returns one 0/1 entry per frame.
pub fn sample_decision(probs: &Tensor, mode: SampleMode, temperature: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let s = probs.shape();
    if s.len() < 2 || s[s.len() - 1] != 2 || s[s.len() - 2] == 0 {
        return Err(Error::shape("sample_decision", format!("{s:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("sampling temperature must be positive".into()));
    }
    let frames = s[s.len() - 2];
    let scores = match mode {
        SampleMode::Eval => probs.clone(),
        SampleMode::Train => {
            let g = gumbel_noise(s, rng);
            let data = probs
                .data()
                .iter()
                .zip(g.data())
                .map(|(p, g)| (p.ln() + g) / temperature)
                .collect();
            Tensor::new(s.to_vec(), data)?
        }
    };
    Ok(hard_decisions(&scores, probs, frames))
}

/// Output of the keyframe stage for a batch of videos.
pub struct KeyframeOutput {
    /// Frames with dropped rows zeroed, `[B, T, d]`.
    pub kept: Var,
    /// Per-frame `[drop, keep]` probabilities, `[B, T, 2]`.
    pub probs: Var,
    /// Hard decisions, `[B, T]`.
    pub decisions: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyframeHead {
    pub stride: usize,
    pub attention: MultiHeadAttention,
    pub mlp: Mlp,
}

impl KeyframeHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("keyframe stride must be at least 1".into()));
        }
        let attention = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, true)?;
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), &[2 * dim, dim, 2])?;
        Ok(KeyframeHead { stride, attention, mlp })
    }

    /// Self-attention over the frame sequence `[B, T, d]`.
    pub fn global_difference(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        self.attention.forward(tape, store, frames, frames, frames)
    }

    /// Drop/keep logits `[B, T, 2]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let local = local_difference(tape.value(frames), self.stride)?;
        let local = tape.leaf(local);
        let global = self.global_difference(tape, store, frames)?;
        let joint = tape.concat_last(local, global)?;
        self.mlp.forward(tape, store, joint)
    }

    /// Probabilities, decisions and the thinned frames. In train mode the
    /// decisions carry a straight-through gradient: the forward value is the
    /// hard 0/1 decision, the backward pass sees the relaxed keep weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: Var,
        mode: SampleMode,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<KeyframeOutput> {
        let s = tape.shape(frames).to_vec();
        let (b, t) = (s[0], s[1]);
        let logits = self.logits(tape, store, frames)?;
        let probs = tape.softmax_last(logits);
        let weights = match mode {
            SampleMode::Eval => {
                let hard = hard_decisions(tape.value(probs), tape.value(probs), t);
                tape.leaf(Tensor::new(vec![b, t], hard)?)
            }
            SampleMode::Train => {
                if !(temperature > 0.0) {
                    return Err(Error::Config("sampling temperature must be positive".into()));
                }
                // softmax(log pi + g) == softmax(logits + g): the normalizer cancels.
                let noise = tape.leaf(gumbel_noise(&[b, t, 2], rng));
                let perturbed = tape.add(logits, noise)?;
                let scaled = tape.scale(perturbed, 1.0 / temperature);
                let hard = hard_decisions(tape.value(scaled), tape.value(probs), t);
                let soft = tape.softmax_last(scaled);
                let soft_keep = tape.slice_last(soft, 1, 1)?;
                let soft_keep = tape.reshape(soft_keep, vec![b, t])?;
                let offset: Vec<f64> = hard
                    .iter()
                    .zip(tape.value(soft_keep).data())
                    .map(|(h, s)| h - s)
                    .collect();
                let offset = tape.leaf(Tensor::new(vec![b, t], offset)?);
                tape.add(soft_keep, offset)?
            }
        };
        let decisions = Tensor::new(
            vec![b, t],
            tape.value(weights).data().iter().map(|v| v.round()).collect(),
        )?;
        let kept = tape.scale_rows(frames, weights)?;
        Ok(KeyframeOutput { kept, probs, decisions })
    }
}

/// Mean over the batch of `||GRU(kept) - GRU(original)||_2`.
pub fn recon_loss(tape: &mut Tape, store: &ParamStore, gru: &Gru, kept: Var, original: Var) -> Result<Var> {
    if tape.shape(kept) != tape.shape(original) {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?} vs {:?}", tape.shape(kept), tape.shape(original)),
        ));
    }
    let hk = gru.encode(tape, store, kept)?;
    let ho = gru.encode(tape, store, original)?;
    let diff = tape.sub(hk, ho)?;
    let norms = tape.l2_norm_last(diff);
    Ok(tape.mean(norms))
}

/// `sample_id,frame_0,...` with one 0/1 row per video.
pub fn decisions_csv(ids: &[String], decisions: &Tensor) -> String {
    let frames = decisions.last_dim();
    let mut out = String::from("sample_id");
    for j in 0..frames {
        let _ = write!(out, ",frame_{j}");
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(decisions.rows()) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{}", *v as u8);
        }
        out.push('\n');
    }
    out
}
