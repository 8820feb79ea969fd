//! Learnable sparse masks for domain-invariant multimodal features,
//! trained sequentially one modality at a time, with a synthetic causal
//! data generator and an independence-testing analysis suite.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod keyframe;
pub mod mask;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{Batch, Dataset, Dims, Sample};
pub use error::{Error, Result};
pub use mask::{MaskState, MaskedFeatures, Modality};
pub use tensor::Tensor;
