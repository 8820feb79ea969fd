//! Adam with a linear learning-rate warm-up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs over which the rate ramps linearly from 0 to `lr`.
    pub warmup_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_epochs: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: step count and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: BTreeMap<ParamId, Moments>,
    lr_scales: BTreeMap<ParamId, f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(Adam {
            config,
            steps: 0,
            moments: BTreeMap::new(),
            lr_scales: BTreeMap::new(),
        })
    }

    /// Multiplies the rate of one parameter by `scale`.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scales.insert(id, scale);
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Rate at fractional epoch `progress` (epoch index plus the fraction
    /// of that epoch already completed).
    pub fn effective_lr(&self, progress: f64) -> f64 {
        let w = self.config.warmup_epochs;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * (progress / w as f64).clamp(0.0, 1.0)
        }
    }

    /// Applies one update to every parameter in `params`. Each must have a
    /// gradient in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        params: &[ParamId],
        grads: &[(ParamId, Tensor)],
        progress: f64,
    ) -> Result<()> {
        let lookup: BTreeMap<ParamId, &Tensor> = grads.iter().map(|(id, g)| (*id, g)).collect();
        // Validate before touching any state.
        for &id in params {
            match lookup.get(&id) {
                None => return Err(Error::MissingGrad(store.name(id).to_string())),
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(Error::shape(
                        "adam",
                        format!(
                            "gradient for `{}` is {:?}, parameter is {:?}",
                            store.name(id),
                            g.shape(),
                            store.get(id).shape()
                        ),
                    ))
                }
                Some(_) => {}
            }
        }

        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let lr = self.effective_lr(progress);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for &id in params {
            let g = lookup[&id].data();
            let n = g.len();
            let state = self.moments.entry(id).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let lr = lr * self.lr_scales.get(&id).copied().unwrap_or(1.0);
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g[i];
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = state.first[i] / c1;
                let v_hat = state.second[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
