//! Versioned JSON checkpoint holding one trained model per horizon.
//!
//! Layout (version 1):
//!
//! ```json
//! {
//!   "format": "robustcast-checkpoint",
//!   "version": 1,
//!   "models": [
//!     {
//!       "horizon": 96,
//!       "config": { "lookback": 96, "horizon": 96, ... },
//!       "parameters": [ { "name": "head.weight", "shape": [224, 96], "values": [...] } ]
//!     }
//!   ]
//! }
//! ```
//!
//! Parameter names are the dotted module paths of [`ParamStore`](crate::nn::ParamStore);
//! values are row-major and written with round-trip precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{Model, ModelConfig};

pub const FORMAT: &str = "robustcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub horizon: usize,
    pub config: ModelConfig,
    pub parameters: Vec<ParamRecord>,
}

impl ModelRecord {
    pub fn from_model(model: &Model) -> Self {
        Self {
            horizon: model.config.horizon,
            config: model.config.clone(),
            parameters: model
                .store
                .entries()
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; names and shapes must match the config exactly.
    pub fn to_model(&self) -> Result<Model> {
        let model = Model::new(self.config.clone())?;
        let entries = model.store.entries();
        if entries.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                entries.len(),
                self.parameters.len()
            )));
        }
        for ((name, tensor), rec) in entries.iter().zip(&self.parameters) {
            if *name != rec.name || tensor.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {name} {:?}, checkpoint has {} {:?}",
                    tensor.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            tensor.set_values(&rec.values)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub models: Vec<ModelRecord>,
}

impl Checkpoint {
    pub fn from_models<'a>(models: impl IntoIterator<Item = &'a Model>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            models: models.into_iter().map(ModelRecord::from_model).collect(),
        }
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.horizon).collect()
    }

    /// The model trained for `horizon`, or an error listing what is available.
    pub fn model_for(&self, horizon: usize) -> Result<Model> {
        self.models
            .iter()
            .find(|m| m.horizon == horizon)
            .ok_or_else(|| Error::Checkpoint(format!("no model for horizon {horizon}; available horizons: {:?}", self.horizons())))?
            .to_model()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            lookback: 8,
            horizon: 2,
            patch_len: 4,
            hidden: 4,
            reduced: 2,
            pool_dim: 2,
            experts: 2,
            top_k: 1,
            heads: 1,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = Model::new(small()).unwrap();
        let ckpt = Checkpoint::from_models([&model]);
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.model_for(2).unwrap();
        assert_eq!(restored.store.snapshot(), model.store.snapshot());
    }

    #[test]
    fn missing_horizon_lists_available() {
        let model = Model::new(small()).unwrap();
        let err = Checkpoint::from_models([&model]).model_for(96).unwrap_err().to_string();
        assert!(err.contains("[2]"), "{err}");
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_json(r#"{"format":"other","version":1,"models":[]}"#).is_err());
        assert!(Checkpoint::from_json(r#"{"format":"robustcast-checkpoint","version":7,"models":[]}"#).is_err());
    }
}
