//! Per-window instance normalization and patch segmentation.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the standard deviation before dividing (and before rescaling).
pub const NORM_EPS: f64 = 1e-5;

/// Statistics of one lookback window, one entry per channel. `std` is the raw
/// biased standard deviation; [`NORM_EPS`] is added whenever it is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Standardizes each row of `data` (rows of length `row_len`) in place and
/// returns the per-row mean and biased standard deviation.
pub fn normalize_rows(data: &mut [f64], row_len: usize) -> NormStats {
    let rows = data.len() / row_len.max(1);
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        std: Vec::with_capacity(rows),
    };
    for row in data.chunks_mut(row_len) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / (std + NORM_EPS);
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    stats
}

/// Normalizes an `N × T` window per channel.
pub fn instance_normalize(x: &Array2<f64>) -> (Array2<f64>, NormStats) {
    let (n, t) = x.dim();
    let mut data: Vec<f64> = x.iter().copied().collect();
    let stats = normalize_rows(&mut data, t);
    let out = Array2::from_shape_vec((n, t), data).expect("shape preserved");
    (out, stats)
}

/// Inverse of [`instance_normalize`] applied to an `N × F` prediction.
pub fn denormalize(y: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if y.nrows() != stats.channels() {
        return Err(Error::shape("denormalize", &[y.nrows(), y.ncols()], &[stats.channels()]));
    }
    let mut out = y.clone();
    for (mut row, (m, s)) in out.rows_mut().into_iter().zip(stats.mean.iter().zip(&stats.std)) {
        row.mapv_inplace(|v| v * (s + NORM_EPS) + m);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Left-pad with the first time point until the length divides evenly.
    #[default]
    FrontReplicate,
    /// Reject lengths that are not a multiple of the patch length.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl PatchConfig {
    pub fn new(patch_len: usize, padding: Padding) -> Result<Self> {
        let cfg = Self { patch_len, padding };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::config("patch length must be at least 1"));
        }
        Ok(())
    }

    /// Number of non-overlapping patches covering `len` points.
    pub fn patch_count(&self, len: usize) -> usize {
        len.div_ceil(self.patch_len)
    }

    /// Front padding needed for `len` points, or an error in strict mode.
    pub fn padding_for(&self, len: usize) -> Result<usize> {
        self.validate()?;
        let pad = self.patch_count(len) * self.patch_len - len;
        if pad > 0 && self.padding == Padding::Strict {
            return Err(Error::config(format!(
                "series length {len} is not divisible by patch length {}",
                self.patch_len
            )));
        }
        Ok(pad)
    }
}

/// Pads each row of `data` to a whole number of patches. Output rows have
/// length `patch_count * patch_len`.
pub fn pad_rows(data: &[f64], row_len: usize, cfg: &PatchConfig) -> Result<Vec<f64>> {
    let pad = cfg.padding_for(row_len)?;
    if pad == 0 {
        return Ok(data.to_vec());
    }
    let mut out = Vec::with_capacity(data.len() / row_len * (row_len + pad));
    for row in data.chunks(row_len) {
        out.extend(std::iter::repeat_n(row[0], pad));
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Splits an `N × T` series into `N × n × p` non-overlapping patches.
pub fn make_patches(x: &Array2<f64>, cfg: &PatchConfig) -> Result<Array3<f64>> {
    let (n, t) = x.dim();
    if t == 0 {
        return Err(Error::config("cannot patch an empty series"));
    }
    let data: Vec<f64> = x.iter().copied().collect();
    let padded = pad_rows(&data, t, cfg)?;
    let patches = cfg.patch_count(t);
    Ok(Array3::from_shape_vec((n, patches, cfg.patch_len), padded).expect("padded length is n·p"))
}

/// Concatenates patches back into rows of `len` points, dropping front padding.
pub fn unpatch(patches: &Array3<f64>, len: usize) -> Array2<f64> {
    let (n, count, p) = patches.dim();
    let pad = count * p - len;
    let mut out = Array2::zeros((n, len));
    for c in 0..n {
        let flat: Vec<f64> = patches.slice(ndarray::s![c, .., ..]).iter().copied().collect();
        out.row_mut(c).assign(&ndarray::ArrayView1::from(&flat[pad..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalizes_with_biased_std() {
        let (y, stats) = instance_normalize(&array![[1.0, 2.0, 3.0]]);
        assert_eq!(stats.mean, vec![2.0]);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((stats.std[0] - 0.8165).abs() < 1e-4);
        assert!((y[[0, 0]] + 1.2247).abs() < 1e-4);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y[[0, 2]] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let (y, stats) = instance_normalize(&array![[5.0, 5.0, 5.0]]);
        assert_eq!(stats.std, vec![0.0]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_zeros_gives_mean() {
        let stats = NormStats { mean: vec![2.0], std: vec![0.8165] };
        let y = denormalize(&Array2::zeros((1, 4)), &stats).unwrap();
        assert!(y.iter().all(|&v| v == 2.0));
        assert!(denormalize(&Array2::zeros((2, 4)), &stats).is_err());
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let x = array![[1.0, 4.0, -2.0, 7.5], [3.0, 3.0, 3.0, 3.0]];
        let (y, stats) = instance_normalize(&x);
        let back = denormalize(&y, &stats).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn patches_of_lookback_96() {
        let x = Array2::from_shape_fn((1, 96), |(_, t)| t as f64);
        let cfg = PatchConfig::new(16, Padding::FrontReplicate).unwrap();
        let p = make_patches(&x, &cfg).unwrap();
        assert_eq!(p.dim(), (1, 6, 16));
        for j in 0..6 {
            for k in 0..16 {
                assert_eq!(p[[0, j, k]], (j * 16 + k) as f64);
            }
        }
    }

    #[test]
    fn single_patch_is_the_series() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let p = make_patches(&x, &PatchConfig::new(4, Padding::Strict).unwrap()).unwrap();
        assert_eq!(p.dim(), (1, 1, 4));
        assert_eq!(p.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn front_replicate_padding() {
        let x = array![[7.0, 1.0, 2.0, 3.0, 4.0]];
        let cfg = PatchConfig::new(4, Padding::FrontReplicate).unwrap();
        let p = make_patches(&x, &cfg).unwrap();
        assert_eq!(p.dim(), (1, 2, 4));
        assert_eq!(p.slice(ndarray::s![0, 0, ..]).to_vec(), vec![7.0; 4]);
        assert_eq!(unpatch(&p, 5), x);
    }

    #[test]
    fn strict_rejects_ragged_length() {
        let x = Array2::zeros((1, 5));
        assert!(make_patches(&x, &PatchConfig::new(4, Padding::Strict).unwrap()).is_err());
        assert!(PatchConfig::new(0, Padding::Strict).is_err());
    }
}
