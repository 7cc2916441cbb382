//! Robust multivariate time-series forecasting: a patch-based forecaster with
//! mixture-of-experts embedding and token replacement, plus the corruption,
//! data and metric tooling used to evaluate it.

pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod predictor;
pub mod preprocess;
pub mod replacement;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use nn::{Mode, ParamStore};
pub use predictor::{Model, ModelConfig};
pub use tensor::Tensor;
