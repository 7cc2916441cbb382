//! Synthetic corruption of clean series: white noise, anomalies, missing
//! segments and piecewise distribution shift.
//!
//! All functions take the series time-major (`T × N`) and draw every random
//! number from a per-channel stream derived from the supplied seed, so
//! results do not depend on channel iteration order.

use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    WhiteNoise,
    Anomalies,
    Missing,
    DistributionShift,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::WhiteNoise,
        PerturbKind::Anomalies,
        PerturbKind::Missing,
        PerturbKind::DistributionShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::WhiteNoise => "white-noise",
            PerturbKind::Anomalies => "anomalies",
            PerturbKind::Missing => "missing",
            PerturbKind::DistributionShift => "distribution-shift",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Sweep levels used for the robustness table. Level 0 is the clean series.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            PerturbKind::DistributionShift => vec![0.0, 1.0, 3.0, 5.0, 10.0],
            _ => vec![0.0, 0.01, 0.05, 0.10, 0.15],
        }
    }

    /// Column label of a level: `5%` for ratios, `3` for segment counts.
    pub fn level_label(self, level: f64) -> String {
        if level == 0.0 {
            return "ori".into();
        }
        match self {
            PerturbKind::DistributionShift => format!("{level}"),
            _ => format!("{}%", (level * 1e4).round() / 1e2),
        }
    }

    fn stream(self) -> u64 {
        match self {
            PerturbKind::WhiteNoise => 0xA001,
            PerturbKind::Anomalies => 0xA002,
            PerturbKind::Missing => 0xA003,
            PerturbKind::DistributionShift => 0xA004,
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Corruption parameters. Only the fields belonging to `kind` are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub r_noise: f64,
    pub alpha_noise: f64,
    pub r_cont: f64,
    pub l_cont: usize,
    pub r_out: f64,
    pub alpha_anom: f64,
    pub r_miss: f64,
    pub l_miss: usize,
    pub k_shift: usize,
    pub alpha_shift: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kind: PerturbKind::WhiteNoise,
            r_noise: 0.0,
            alpha_noise: 1.0,
            r_cont: 0.0,
            l_cont: 12,
            r_out: 0.005,
            alpha_anom: 2.0,
            r_miss: 0.0,
            l_miss: 12,
            k_shift: 1,
            alpha_shift: 5.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("r_noise", self.r_noise),
            ("r_cont", self.r_cont),
            ("r_out", self.r_out),
            ("r_miss", self.r_miss),
        ];
        for (name, r) in ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        let scales = [
            ("alpha_noise", self.alpha_noise),
            ("alpha_anom", self.alpha_anom),
            ("alpha_shift", self.alpha_shift),
        ];
        for (name, a) in scales {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {a}")));
            }
        }
        if self.l_cont == 0 || self.l_miss == 0 {
            return Err(Error::config("segment lengths l_cont and l_miss must be at least 1"));
        }
        if self.kind == PerturbKind::DistributionShift && self.k_shift == 0 {
            return Err(Error::config("k_shift must be at least 1"));
        }
        Ok(())
    }

    /// The swept parameter of `kind` (ratio or segment count).
    pub fn level(&self) -> f64 {
        match self.kind {
            PerturbKind::WhiteNoise => self.r_noise,
            PerturbKind::Anomalies => self.r_cont,
            PerturbKind::Missing => self.r_miss,
            PerturbKind::DistributionShift => self.k_shift as f64,
        }
    }

    /// Copy with the swept parameter set to `level`.
    pub fn with_level(&self, level: f64) -> Result<Self> {
        let mut s = self.clone();
        match self.kind {
            PerturbKind::WhiteNoise => s.r_noise = level,
            PerturbKind::Anomalies => s.r_cont = level,
            PerturbKind::Missing => s.r_miss = level,
            PerturbKind::DistributionShift => {
                if level < 0.0 || level.fract() != 0.0 {
                    return Err(Error::config(format!("k_shift level must be a whole number, got {level}")));
                }
                s.k_shift = level as usize;
            }
        }
        Ok(s)
    }
}

/// A corrupted series together with the number of distinct positions each
/// channel had touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    /// `T × N`
    pub data: Array2<f64>,
    pub modified: Vec<usize>,
}

/// Biased (`1/T`) standard deviation.
pub fn channel_std(column: ArrayView1<'_, f64>) -> f64 {
    let n = column.len() as f64;
    if column.is_empty() {
        return 0.0;
    }
    let mean = column.iter().sum::<f64>() / n;
    (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn channel_rng(seed: u64, kind: PerturbKind, channel: usize) -> ChaCha8Rng {
    rng::rng(rng::derive(rng::derive(seed, kind.stream()), channel as u64))
}

fn sign(r: &mut ChaCha8Rng) -> f64 {
    if r.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn count_touched(touched: &[bool]) -> usize {
    touched.iter().filter(|&&t| t).count()
}

/// Adds `𝒩(0, (α·σ_c)²)` noise to `⌊T·r⌋` distinct points per channel.
pub fn inject_white_noise(x: &Array2<f64>, r_noise: f64, alpha: f64, seed: u64) -> Perturbed {
    let (t, n) = x.dim();
    let mut data = x.clone();
    let mut modified = vec![0; n];
    let count = (t as f64 * r_noise).floor() as usize;
    for c in 0..n {
        let sigma = channel_std(x.column(c));
        if count == 0 || sigma == 0.0 {
            continue;
        }
        let mut r = channel_rng(seed, PerturbKind::WhiteNoise, c);
        let idx = index::sample(&mut r, t, count.min(t)).into_vec();
        for &i in &idx {
            let eps: f64 = r.sample(StandardNormal);
            data[[i, c]] += eps * alpha * sigma;
        }
        modified[c] = idx.len();
    }
    Perturbed { data, modified }
}

/// Adds `⌊T·r_cont/L⌋` constant `±α·σ_c` offsets over length-`L` segments
/// (starts drawn with replacement, overlaps allowed), then `⌊T·r_out⌋`
/// distinct point outliers of the same magnitude.
pub fn inject_anomalies(x: &Array2<f64>, r_cont: f64, l_cont: usize, r_out: f64, alpha: f64, seed: u64) -> Result<Perturbed> {
    let (t, n) = x.dim();
    let segments = (t as f64 * r_cont / l_cont as f64).floor() as usize;
    if segments > 0 && l_cont > t {
        return Err(Error::config(format!("segment length {l_cont} exceeds series length {t}")));
    }
    let outliers = (t as f64 * r_out).floor() as usize;
    let mut data = x.clone();
    let mut modified = vec![0; n];
    for c in 0..n {
        let sigma = channel_std(x.column(c));
        if sigma == 0.0 {
            continue;
        }
        let mut r = channel_rng(seed, PerturbKind::Anomalies, c);
        let mut touched = vec![false; t];
        for _ in 0..segments {
            let start = r.random_range(0..=t - l_cont);
            let delta = sign(&mut r) * alpha * sigma;
            for i in start..start + l_cont {
                data[[i, c]] += delta;
                touched[i] = true;
            }
        }
        for i in index::sample(&mut r, t, outliers.min(t)) {
            data[[i, c]] += sign(&mut r) * alpha * sigma;
            touched[i] = true;
        }
        modified[c] = count_touched(&touched);
    }
    Ok(Perturbed { data, modified })
}

/// Zeroes `⌊T·r/L⌋` length-`L` segments per channel (starts drawn with
/// replacement, overlaps allowed).
pub fn inject_missing(x: &Array2<f64>, r_miss: f64, l_miss: usize, seed: u64) -> Result<Perturbed> {
    let (t, n) = x.dim();
    let segments = (t as f64 * r_miss / l_miss as f64).floor() as usize;
    if segments > 0 && l_miss > t {
        return Err(Error::config(format!("segment length {l_miss} exceeds series length {t}")));
    }
    let mut data = x.clone();
    let mut modified = vec![0; n];
    for c in 0..n {
        let mut r = channel_rng(seed, PerturbKind::Missing, c);
        let mut touched = vec![false; t];
        for _ in 0..segments {
            let start = r.random_range(0..=t - l_miss);
            for i in start..start + l_miss {
                data[[i, c]] = 0.0;
                touched[i] = true;
            }
        }
        modified[c] = count_touched(&touched);
    }
    Ok(Perturbed { data, modified })
}

/// Splits time into `K` blocks of `⌊T/K⌋` points and offsets each block by
/// `U(−α, α)·σ_c`. Points past `K·⌊T/K⌋` are left alone.
pub fn inject_distribution_shift(x: &Array2<f64>, k_shift: usize, alpha: f64, seed: u64) -> Result<Perturbed> {
    if k_shift == 0 {
        return Err(Error::config("k_shift must be at least 1"));
    }
    let (t, n) = x.dim();
    let block = t / k_shift;
    let mut data = x.clone();
    let mut modified = vec![0; n];
    for c in 0..n {
        let sigma = channel_std(x.column(c));
        if sigma == 0.0 {
            continue;
        }
        let mut r = channel_rng(seed, PerturbKind::DistributionShift, c);
        for k in 0..k_shift {
            let start = k * block;
            let end = ((k + 1) * block).min(t);
            let delta = if alpha > 0.0 { r.random_range(-alpha..alpha) * sigma } else { 0.0 };
            for i in start..end {
                data[[i, c]] += delta;
            }
        }
        modified[c] = k_shift * block;
    }
    Ok(Perturbed { data, modified })
}

/// Applies `spec` to a `T × N` series.
pub fn apply(x: &Array2<f64>, spec: &PerturbationSpec) -> Result<Perturbed> {
    spec.validate()?;
    match spec.kind {
        PerturbKind::WhiteNoise => Ok(inject_white_noise(x, spec.r_noise, spec.alpha_noise, spec.seed)),
        PerturbKind::Anomalies => inject_anomalies(x, spec.r_cont, spec.l_cont, spec.r_out, spec.alpha_anom, spec.seed),
        PerturbKind::Missing => inject_missing(x, spec.r_miss, spec.l_miss, spec.seed),
        PerturbKind::DistributionShift => inject_distribution_shift(x, spec.k_shift, spec.alpha_shift, spec.seed),
    }
}

/// Seed used for one sweep level.
pub fn level_seed(seed: u64, level: f64) -> u64 {
    rng::derive(seed, level.to_bits())
}

/// One corrupted copy per grid level. Level 0 is the clean series for every
/// kind; other levels use a seed derived from `(spec.seed, level)`.
pub fn sweep(x: &Array2<f64>, spec: &PerturbationSpec, grid: &[f64]) -> Result<Vec<(f64, Perturbed)>> {
    if grid.is_empty() {
        return Err(Error::config("perturbation grid is empty"));
    }
    grid.iter()
        .map(|&level| {
            if level == 0.0 {
                return Ok((
                    level,
                    Perturbed {
                        data: x.clone(),
                        modified: vec![0; x.ncols()],
                    },
                ));
            }
            let mut s = spec.with_level(level)?;
            s.seed = level_seed(spec.seed, level);
            Ok((level, apply(x, &s)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, n), |(i, c)| 1.0 + i as f64 * (c + 1) as f64 + (i as f64 * 0.3).sin())
    }

    #[test]
    fn zero_ratios_are_identity() {
        let x = ramp(50, 3);
        assert_eq!(inject_white_noise(&x, 0.0, 1.0, 1).data, x);
        assert_eq!(inject_anomalies(&x, 0.0, 12, 0.0, 2.0, 1).unwrap().data, x);
        assert_eq!(inject_missing(&x, 0.0, 12, 1).unwrap().data, x);
    }

    #[test]
    fn noise_touches_floor_count() {
        let x = ramp(100, 2);
        let p = inject_white_noise(&x, 0.1, 1.0, 7);
        for c in 0..2 {
            let changed = (0..100).filter(|&i| p.data[[i, c]] != x[[i, c]]).count();
            assert_eq!(changed, 10);
        }
        assert_eq!(p.modified, vec![10, 10]);
    }

    #[test]
    fn constant_channel_untouched() {
        let x = Array2::from_elem((40, 1), 3.0);
        assert_eq!(inject_white_noise(&x, 1.0, 1.0, 0).data, x);
        assert_eq!(inject_distribution_shift(&x, 3, 5.0, 0).unwrap().data, x);
        assert_eq!(inject_anomalies(&x, 0.5, 12, 0.1, 2.0, 0).unwrap().data, x);
    }

    #[test]
    fn missing_zeroes_one_segment() {
        let x = ramp(24, 2);
        let p = inject_missing(&x, 0.5, 12, 3).unwrap();
        for c in 0..2 {
            assert_eq!(p.data.column(c).iter().filter(|&&v| v == 0.0).count(), 12);
        }
    }

    #[test]
    fn grids_and_labels() {
        assert_eq!(PerturbKind::WhiteNoise.default_grid(), vec![0.0, 0.01, 0.05, 0.10, 0.15]);
        assert_eq!(PerturbKind::DistributionShift.default_grid(), vec![0.0, 1.0, 3.0, 5.0, 10.0]);
        assert_eq!(PerturbKind::Missing.level_label(0.05), "5%");
        assert_eq!(PerturbKind::DistributionShift.level_label(3.0), "3");
        assert_eq!(PerturbKind::from_name("missing"), Some(PerturbKind::Missing));
    }

    #[test]
    fn validation() {
        let mut s = PerturbationSpec::new(PerturbKind::WhiteNoise);
        s.r_noise = 1.5;
        assert!(s.validate().is_err());
        let mut s = PerturbationSpec::new(PerturbKind::DistributionShift);
        s.k_shift = 0;
        assert!(s.validate().is_err());
        assert!(s.with_level(2.5).is_err());
    }
}
