//! Shared inputs for the benchmarks.

use ndarray::{Array2, Array3};
use robustcast_core::predictor::ModelConfig;

/// Deterministic `[B, N, T]` batch of mixed sines.
pub fn batch(b: usize, n: usize, t: usize) -> Array3<f64> {
    Array3::from_shape_fn((b, n, t), |(i, c, k)| ((i + 1) as f64 * 0.1 + (c + 1) as f64 * 0.05 * k as f64).sin())
}

/// `T × N` series for the corruption benchmarks.
pub fn series(t: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, n), |(k, c)| (k as f64 * 0.03 * (c + 1) as f64).sin() * (c + 1) as f64)
}

/// Default-sized model at lookback and horizon 96.
pub fn standard_config() -> ModelConfig {
    ModelConfig { seed: 1, ..ModelConfig::default() }
}
