//! Learnable threshold masks.
//!
//! A feature `i` is kept when `|r_i| >= s_i`; the kept value is scaled by
//! `r_i`. The step is not differentiable, so the backward pass uses a
//! piecewise-linear surrogate derivative. A regularizer `sum exp(-s_i)`
//! pushes every threshold upward, trading features for sparsity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Text => Modality::Video,
            Modality::Video => Modality::Text,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 0 for negative arguments, 1 otherwise.
pub fn unit_step(t: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Surrogate derivative of [`unit_step`]: `2 - 4|t|` near zero, a flat
/// `0.4` shoulder out to `|t| = 1`, zero beyond.
pub fn surrogate_step_grad(t: f64) -> f64 {
    let a = t.abs();
    // Both pieces meet at 0.4; taking the constant there avoids rounding.
    if a < 0.4 {
        2.0 - 4.0 * a
    } else if a <= 1.0 {
        0.4
    } else {
        0.0
    }
}

/// Mask parameters of one modality as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub modality: Modality,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

/// Result of masking a token matrix and fusing its tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeatures {
    pub masked: Tensor,
    pub fused: Tensor,
    pub retained_fraction: f64,
    pub support: Vec<usize>,
}

impl MaskState {
    pub fn new(modality: Modality, r: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if r.len() != s.len() {
            return Err(Error::shape(
                "mask_state",
                format!("r has {} entries, s has {}", r.len(), s.len()),
            ));
        }
        if s.iter().chain(&r).any(|v| !v.is_finite()) {
            return Err(Error::Input("mask parameters must be finite".into()));
        }
        Ok(MaskState { modality, r, s })
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// Binary keep pattern `p`.
    pub fn binary(&self) -> Vec<f64> {
        self.r
            .iter()
            .zip(&self.s)
            .map(|(r, s)| unit_step(r.abs() - s))
            .collect()
    }

    /// Mask vector `m = r * p`.
    pub fn vector(&self) -> Vec<f64> {
        self.r.iter().zip(self.binary()).map(|(r, p)| r * p).collect()
    }

    /// Indices where `p = 1`.
    pub fn support(&self) -> Vec<usize> {
        self.binary()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices where `p = 0`.
    pub fn removed(&self) -> Vec<usize> {
        self.binary()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.r.is_empty() {
            return 0.0;
        }
        self.support().len() as f64 / self.r.len() as f64
    }

    pub fn sparse_loss(&self) -> f64 {
        self.s.iter().map(|s| (-s).exp()).sum()
    }

    /// Masks `x` (`[tau, d]` or `[B, tau, d]`) and fuses its tokens.
    pub fn apply(&self, x: &Tensor) -> Result<MaskedFeatures> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let r = tape.leaf(Tensor::vector(self.r.clone()));
        let s = tape.leaf(Tensor::vector(self.s.clone()));
        let m = tape.threshold_mask(r, s)?;
        let xc = apply_mask(&mut tape, xv, m)?;
        let fused = token_fuse(&mut tape, xc, m)?;
        Ok(MaskedFeatures {
            masked: tape.value(xc).clone(),
            fused: tape.value(fused).clone(),
            retained_fraction: self.retained_fraction(),
            support: self.support(),
        })
    }

    /// One row per feature: `index,r,s,p`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,r,s,p\n");
        for (i, ((r, s), p)) in self.r.iter().zip(&self.s).zip(self.binary()).enumerate() {
            let _ = writeln!(out, "{i},{r:?},{s:?},{}", p as u8);
        }
        out
    }
}

/// Handles to one modality's mask parameters in a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskParams {
    pub modality: Modality,
    pub r: ParamId,
    pub s: ParamId,
}

impl MaskParams {
    /// Registers `r` with magnitude uniform in `[r_floor, r_init)` and a
    /// random sign, and `s = s_init`. A zero floor gives `U(-r_init, r_init)`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        modality: Modality,
        dim: usize,
        (r_floor, r_init): (f64, f64),
        s_init: f64,
    ) -> Result<Self> {
        let r = (0..dim)
            .map(|_| {
                if r_floor == 0.0 {
                    rng.random_range(-r_init..r_init)
                } else {
                    let mag = rng.random_range(r_floor..r_init);
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                }
            })
            .collect();
        let r = store.insert(format!("{modality}.mask.r"), Tensor::vector(r))?;
        let s = store.insert(format!("{modality}.mask.s"), Tensor::full(&[dim], s_init))?;
        Ok(MaskParams { modality, r, s })
    }

    pub fn state(&self, store: &ParamStore) -> MaskState {
        MaskState {
            modality: self.modality,
            r: store.get(self.r).data().to_vec(),
            s: store.get(self.s).data().to_vec(),
        }
    }

    /// The mask vector `m` on the tape.
    pub fn vector(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let r = tape.param(store, self.r);
        let s = tape.param(store, self.s);
        tape.threshold_mask(r, s)
    }

    pub fn sparse_loss(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let s = tape.param(store, self.s);
        sparse_loss(tape, s)
    }
}

/// `x * m` per token.
pub fn apply_mask(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    tape.mul_last(x, m)
}

/// `sum_i exp(-s_i)`.
pub fn sparse_loss(tape: &mut Tape, s: Var) -> Var {
    let neg = tape.scale(s, -1.0);
    let e = tape.exp(neg);
    tape.sum(e)
}

/// Softmax over tokens of the cosine similarity between each masked token
/// and the mask vector, then the weighted sum of tokens. Accepts
/// `[tau, d]` (returns `[d]`) or `[B, tau, d]` (returns `[B, d]`).
pub fn token_fuse(tape: &mut Tape, masked: Var, m: Var) -> Result<Var> {
    let shape = tape.shape(masked).to_vec();
    let (batched, x) = match shape.len() {
        2 => (false, tape.reshape(masked, vec![1, shape[0], shape[1]])?),
        3 => (true, masked),
        _ => return Err(Error::shape("token_fuse", format!("{shape:?}"))),
    };
    if tape.shape(x)[1] == 0 {
        return Err(Error::Input("token fusion needs at least one token".into()));
    }
    let sim = tape.cosine_last(x, m)?;
    let weights = tape.softmax_last(sim);
    let fused = tape.weighted_tokens(weights, x)?;
    if batched {
        Ok(fused)
    } else {
        let d = shape[1];
        tape.reshape(fused, vec![d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_step_branches() {
        assert_eq!(unit_step(-0.3), 0.0);
        assert_eq!(unit_step(0.0), 1.0);
        assert_eq!(unit_step(2.7), 1.0);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_step_grad(0.0), 2.0);
        assert_eq!(surrogate_step_grad(0.7), 0.4);
        assert_eq!(surrogate_step_grad(1.5), 0.0);
        assert_eq!(surrogate_step_grad(0.4), 0.4);
        assert!((surrogate_step_grad(-0.1) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn apply_mask_hand_case() {
        let state = MaskState::new(Modality::Text, vec![0.5, -0.2], vec![0.3, 0.3]).unwrap();
        assert_eq!(state.binary(), vec![1.0, 0.0]);
        assert_eq!(state.vector(), vec![0.5, 0.0]);
        let x = Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let out = state.apply(&x).unwrap();
        assert_eq!(out.masked.data(), &[1.0, 0.0]);
        assert_eq!(out.support, vec![0]);
        assert_eq!(out.retained_fraction, 0.5);
    }

    #[test]
    fn very_negative_thresholds_keep_everything() {
        let r = vec![0.3, -0.7, 0.01];
        let state = MaskState::new(Modality::Video, r.clone(), vec![-10.0; 3]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let out = state.apply(&x).unwrap();
        for (row_out, row_in) in out.masked.rows().zip(x.rows()) {
            for j in 0..3 {
                assert_eq!(row_out[j], row_in[j] * r[j]);
            }
        }
        assert_eq!(state.retained_fraction(), 1.0);
    }

    #[test]
    fn threshold_at_magnitude_keeps_feature() {
        let state = MaskState::new(Modality::Text, vec![-0.25], vec![0.25]).unwrap();
        assert_eq!(state.support(), vec![0]);
    }

    #[test]
    fn retained_fraction_cases() {
        let all = MaskState::new(Modality::Text, vec![0.5, 0.1], vec![0.0, 0.0]).unwrap();
        assert_eq!(all.retained_fraction(), 1.0);
        let none = MaskState::new(Modality::Text, vec![0.5, 0.1], vec![0.9, 0.9]).unwrap();
        assert_eq!(none.retained_fraction(), 0.0);
        let half = MaskState::new(Modality::Text, vec![0.5, 0.1], vec![0.3, 0.3]).unwrap();
        assert_eq!(half.retained_fraction(), 0.5);
    }

    #[test]
    fn sparse_loss_values_and_gradient() {
        let st = MaskState::new(Modality::Text, vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(st.sparse_loss(), 3.0);
        let st = MaskState::new(Modality::Text, vec![0.0], vec![2f64.ln()]).unwrap();
        assert!((st.sparse_loss() - 0.5).abs() < 1e-15);

        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.0]));
        let l = sparse_loss(&mut tape, s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn fuse_single_token_returns_it() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![1.0, 0.5, 0.0]));
        let f = token_fuse(&mut tape, x, m).unwrap();
        assert_eq!(tape.value(f).data(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn fuse_identical_tokens_weights_evenly() {
        let mut tape = Tape::new();
        let row = vec![0.3, -1.0, 2.0];
        let x = tape.leaf(Tensor::from_rows(&[row.clone(), row.clone()]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![1.0, 0.5, 0.1]));
        let f = token_fuse(&mut tape, x, m).unwrap();
        for (a, b) in tape.value(f).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_orthogonal_vs_parallel_weight_ratio() {
        // cosines {0, 1} -> softmax weights proportional to {1, e}
        let a = vec![0.0, 1.0];
        let b = vec![1.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[a, b]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let f = token_fuse(&mut tape, x, m).unwrap();
        let out = tape.value(f).data();
        // out = w_a * a + w_b * b = (w_b, w_a)
        let ratio = out[0] / out[1];
        assert!((ratio - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_vector_gives_uniform_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let m = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let f = token_fuse(&mut tape, x, m).unwrap();
        assert_eq!(tape.value(f).data(), &[0.5, 1.5]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(MaskState::new(Modality::Text, vec![0.0; 2], vec![0.0; 3]).is_err());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let m = tape.leaf(Tensor::zeros(&[2]));
        assert!(apply_mask(&mut tape, x, m).is_err());
    }

    #[test]
    fn csv_lists_every_feature() {
        let st = MaskState::new(Modality::Text, vec![0.5, -0.2], vec![0.3, 0.3]).unwrap();
        let csv = st.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1), Some("0,0.5,0.3,1"));
        assert_eq!(csv.lines().nth(2), Some("1,-0.2,0.3,0"));
    }
}
