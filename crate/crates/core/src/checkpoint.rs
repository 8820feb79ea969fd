//! JSON checkpoints: config, trainer RNG state and every named tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::RngState;

pub const FORMAT: &str = "seqmask-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub rng: Option<RngState>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model, rng: Option<RngState>) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            config: model.config.clone(),
            rng,
            params: model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the architecture from the stored config, then overwrites
    /// every parameter by name. Missing, extra or reshaped tensors are errors.
    pub fn restore(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Data(format!("not a checkpoint (format tag `{}`)", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                self.version
            )));
        }
        let mut model = Model::new(self.config.clone())?;
        if self.params.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter `{}` in checkpoint", p.name)))?;
            if !p.tensor.is_finite() {
                return Err(Error::Data(format!("parameter `{}` has non-finite values", p.name)));
            }
            model.store.set(id, p.tensor.clone())?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            text_dim: 6,
            video_dim: 5,
            text_tokens: 2,
            video_frames: 3,
            heads: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = Model::new(small()).unwrap();
        let id = model.store.id("text.mask.r").unwrap();
        model.store.get_mut(id).data_mut()[0] = 0.1 + 0.2;
        let rng = RngState {
            seed: 3,
            word_pos: 1 << 70,
        };
        let ck = Checkpoint::capture(&model, Some(rng));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        assert_eq!(restored.store, model.store);
    }

    #[test]
    fn rejects_foreign_or_mismatched_files() {
        let model = Model::new(small()).unwrap();
        let mut ck = Checkpoint::capture(&model, None);
        ck.version = 99;
        assert!(ck.restore().is_err());
        let mut ck = Checkpoint::capture(&model, None);
        ck.params[0].name = "nope".into();
        assert!(ck.restore().is_err());
        let mut ck = Checkpoint::capture(&model, None);
        ck.params.pop();
        assert!(ck.restore().is_err());
        let mut ck = Checkpoint::capture(&model, None);
        ck.params[0].tensor = Tensor::zeros(&[1]);
        assert!(ck.restore().is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
