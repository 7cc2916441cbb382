//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! out = "runs/etth2"          # optional
//!
//! [data]
//! path = "data/ETTh2.csv"    # relative to this file
//! split = { train = 0.6, val = 0.2, test = 0.2 }
//!
//! [model]                    # any ModelConfig field
//! lookback = 96
//! tau = 0.5
//!
//! [train]                    # any TrainOptions field except seed
//! epochs = 10
//!
//! [eval]
//! horizons = [96, 192, 336, 720]
//!
//! [perturb]                  # any PerturbationSpec field except seed
//! kind = "missing"
//! r_miss = 0.1
//! apply_to = "full"
//!
//! [robustbench]
//! kinds = ["white-noise", "missing"]
//! mode = "retrain"
//! ```
//!
//! The top-level `seed` is mandatory and seeds model initialization,
//! training order and corruption alike.

use std::path::{Path, PathBuf};

use robustcast_core::data::SplitRatios;
use robustcast_core::metrics::MetricOptions;
use robustcast_core::perturb::{PerturbKind, PerturbationSpec};
use robustcast_core::predictor::{ModelConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSection>,
    #[serde(default)]
    pub robustbench: RobustbenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub split: SplitRatios,
    /// Step between consecutive training windows.
    pub stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            split: SplitRatios::SIX_TWO_TWO,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub min_batch_size: usize,
    pub lr: f64,
    pub patience: Option<usize>,
    pub memory_budget: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            min_batch_size: t.min_batch_size,
            lr: t.lr,
            patience: t.patience,
            memory_budget: t.memory_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricScale {
    /// Original units, after denormalization.
    #[default]
    Raw,
    /// Z-scored with the training split's per-channel mean and std.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Horizons to train and evaluate; empty means `[model.horizon]`.
    pub horizons: Vec<usize>,
    /// Also report MASE and msMAPE.
    pub extended: bool,
    pub scale: MetricScale,
    pub seasonality: usize,
    pub msmape_eps: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = MetricOptions::default();
        Self {
            horizons: Vec::new(),
            extended: false,
            scale: MetricScale::Raw,
            seasonality: m.seasonality,
            msmape_eps: m.msmape_eps,
        }
    }
}

impl EvalSection {
    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            seasonality: self.seasonality,
            msmape_eps: self.msmape_eps,
        }
    }
}

/// Which part of the series a corruption touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplyTo {
    /// The whole series, before splitting.
    #[default]
    Full,
    /// Only the training portion; validation and test stay clean.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    #[serde(flatten)]
    pub spec: PerturbationSpec,
    #[serde(default)]
    pub apply_to: ApplyTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Corrupt, then train a fresh model per level.
    #[default]
    Retrain,
    /// Train once on clean data and evaluate on each corrupted test split.
    TestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustbenchSection {
    pub kinds: Vec<PerturbKind>,
    /// Overrides every kind's default grid when set.
    pub grid: Option<Vec<f64>>,
    pub mode: BenchMode,
    pub apply_to: ApplyTo,
}

impl Default for RobustbenchSection {
    fn default() -> Self {
        Self {
            kinds: PerturbKind::ALL.to_vec(),
            grid: None,
            mode: BenchMode::Retrain,
            apply_to: ApplyTo::Full,
        }
    }
}

impl RunConfig {
    /// Parses TOML, resolving `data.path` against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if !cfg.data.path.as_os_str().is_empty() && cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        Self::from_toml(&text, &base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Propagates the top-level seed into the model and corruption specs.
    pub fn apply_seed(&mut self) {
        self.model.seed = self.seed;
        if let Some(p) = &mut self.perturb {
            p.spec.seed = self.seed;
        }
    }

    pub fn horizons(&self) -> Vec<usize> {
        if self.eval.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.eval.horizons.clone()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            epochs: t.epochs,
            batch_size: t.batch_size,
            min_batch_size: t.min_batch_size,
            lr: t.lr,
            patience: t.patience,
            seed: self.seed,
            memory_budget: t.memory_budget,
        }
    }

    pub fn model_for(&self, horizon: usize) -> ModelConfig {
        ModelConfig { horizon, seed: self.seed, ..self.model.clone() }
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self, needs_data: bool) -> Result<(), CliError> {
        let field = |name: &str, e: robustcast_core::Error| match e {
            robustcast_core::Error::Config(m) => CliError::Config(format!("{name}: {m}")),
            other => CliError::Config(format!("{name}: {other}")),
        };
        if needs_data {
            if self.data.path.as_os_str().is_empty() {
                return Err(CliError::Config("data.path: missing".into()));
            }
            if !self.data.path.exists() {
                return Err(CliError::Config(format!("data.path: {} does not exist", self.data.path.display())));
            }
        }
        if self.data.stride == 0 {
            return Err(CliError::Config("data.stride: must be at least 1".into()));
        }
        self.data.split.validate().map_err(|e| field("data.split", e))?;
        for h in self.horizons() {
            self.model_for(h).validate().map_err(|e| field("model", e))?;
        }
        self.train_options().validate().map_err(|e| field("train", e))?;
        if let Some(p) = &self.perturb {
            p.spec.validate().map_err(|e| field("perturb", e))?;
        }
        if let Some(g) = &self.robustbench.grid {
            if g.is_empty() {
                return Err(CliError::Config("robustbench.grid: must not be empty".into()));
            }
        }
        if self.eval.seasonality == 0 {
            return Err(CliError::Config("eval.seasonality: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}
