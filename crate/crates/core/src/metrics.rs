//! Point-forecast error metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Seasonal period `m` of the naive forecaster used to scale MASE.
    pub seasonality: usize,
    /// Denominator offset `ε` of msMAPE.
    pub msmape_eps: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            seasonality: 1,
            msmape_eps: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// `None` when the seasonal-naive scale is zero or undefined.
    pub mase: Option<f64>,
    pub msmape: f64,
}

impl Metrics {
    /// `(name, value)` pairs in a fixed order; undefined MASE is NaN.
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("mse", self.mse),
            ("mae", self.mae),
            ("mase", self.mase.unwrap_or(f64::NAN)),
            ("msmape", self.msmape),
        ]
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("metric", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyAxis { op: "metric" });
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

fn msmape_term(p: f64, y: f64, eps: f64) -> f64 {
    200.0 * (p - y).abs() / (p.abs() + y.abs() + eps).max(0.5 + eps)
}

pub fn msmape(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(&p, &y)| msmape_term(p, y, eps)).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error of the seasonal-naive forecaster `y[t-m]` over the
/// context. `None` if the context is too short or the error is zero.
pub fn seasonal_naive_scale(context: &[f64], m: usize) -> Option<f64> {
    if m == 0 || context.len() <= m {
        return None;
    }
    let n = context.len() - m;
    let scale = (m..context.len()).map(|t| (context[t] - context[t - m]).abs()).sum::<f64>() / n as f64;
    (scale > 0.0 && scale.is_finite()).then_some(scale)
}

pub fn mase(pred: &[f64], target: &[f64], context: &[f64], m: usize) -> Result<Option<f64>> {
    let err = mae(pred, target)?;
    Ok(seasonal_naive_scale(context, m).map(|s| err / s))
}

/// Aggregates errors over many `N × F` windows. Totals are accumulated in
/// push order, so results depend only on the window order.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    eps: f64,
    count: usize,
    sq: f64,
    abs: f64,
    smape: f64,
    abs_per_channel: Vec<f64>,
    count_per_channel: usize,
}

impl MetricAccumulator {
    pub fn new(channels: usize, opts: &MetricOptions) -> Self {
        Self {
            eps: opts.msmape_eps,
            count: 0,
            sq: 0.0,
            abs: 0.0,
            smape: 0.0,
            abs_per_channel: vec![0.0; channels],
            count_per_channel: 0,
        }
    }

    pub fn push(&mut self, pred: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
        if pred.dim() != target.dim() || pred.nrows() != self.abs_per_channel.len() {
            return Err(Error::shape("metric", pred.shape(), target.shape()));
        }
        for (c, (prow, yrow)) in pred.rows().into_iter().zip(target.rows()).enumerate() {
            for (&p, &y) in prow.iter().zip(yrow.iter()) {
                let e = p - y;
                self.sq += e * e;
                self.abs += e.abs();
                self.smape += msmape_term(p, y, self.eps);
                self.abs_per_channel[c] += e.abs();
            }
        }
        self.count += pred.len();
        self.count_per_channel += pred.ncols();
        Ok(())
    }

    /// Final metrics. MASE is the channel mean of per-channel MAE over the
    /// channel's seasonal-naive scale on `context` (`N × L`); it is undefined
    /// if any channel's scale is.
    pub fn finish(&self, context: Option<&Array2<f64>>, opts: &MetricOptions) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::EmptyAxis { op: "metric" });
        }
        let n = self.count as f64;
        let mase = match context {
            Some(ctx) => {
                if ctx.nrows() != self.abs_per_channel.len() {
                    return Err(Error::shape("mase", ctx.shape(), &[self.abs_per_channel.len()]));
                }
                let mut acc = Some(0.0);
                for (c, row) in ctx.rows().into_iter().enumerate() {
                    let row: Vec<f64> = row.to_vec();
                    let mae_c = self.abs_per_channel[c] / self.count_per_channel as f64;
                    acc = match (acc, seasonal_naive_scale(&row, opts.seasonality)) {
                        (Some(a), Some(s)) => Some(a + mae_c / s),
                        _ => None,
                    };
                }
                acc.map(|a| a / self.abs_per_channel.len() as f64)
            }
            None => None,
        };
        Ok(Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            mase,
            msmape: self.smape / n,
        })
    }
}

/// Metrics of one `N × F` forecast against its target.
pub fn metrics(pred: &Array2<f64>, target: &Array2<f64>, context: Option<&Array2<f64>>, opts: &MetricOptions) -> Result<Metrics> {
    let mut acc = MetricAccumulator::new(pred.nrows(), opts);
    acc.push(pred, target)?;
    acc.finish(context, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_forecast() {
        let y = [1.0, -2.0, 3.5];
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(msmape(&y, &y, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn hand_values() {
        assert_eq!(mse(&[2.0], &[0.0]).unwrap(), 4.0);
        assert_eq!(mae(&[2.0], &[0.0]).unwrap(), 2.0);
        // 200·2 / max(2.1, 0.6)
        assert_eq!(msmape(&[2.0], &[0.0], 0.1).unwrap(), 400.0 / 2.1);
        // floor branch: 200·0.1 / max(0.2, 0.6)
        assert_eq!(msmape(&[0.1], &[0.0], 0.1).unwrap(), 20.0 / 0.6);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mase_hand_value() {
        assert_eq!(seasonal_naive_scale(&[1.0, 2.0, 3.0, 4.0], 1), Some(1.0));
        let m = mase(&[1.5], &[1.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(m, Some(0.5));
        assert_eq!(seasonal_naive_scale(&[2.0, 2.0, 2.0], 1), None);
        assert_eq!(seasonal_naive_scale(&[2.0], 1), None);
    }

    #[test]
    fn accumulator_matches_flat_functions() {
        let opts = MetricOptions::default();
        let p = array![[1.0, 2.0], [0.0, -1.0]];
        let y = array![[0.5, 2.5], [1.0, -1.0]];
        let ctx = array![[0.0, 1.0, 3.0], [1.0, 1.0, 2.0]];
        let m = metrics(&p, &y, Some(&ctx), &opts).unwrap();
        let pf: Vec<f64> = p.iter().copied().collect();
        let yf: Vec<f64> = y.iter().copied().collect();
        assert_eq!(m.mse, mse(&pf, &yf).unwrap());
        assert_eq!(m.mae, mae(&pf, &yf).unwrap());
        // channel 0: mae 0.5 / scale 1.5; channel 1: mae 0.5 / scale 0.5
        assert!((m.mase.unwrap() - (0.5 / 1.5 + 1.0) / 2.0).abs() < 1e-15);
    }
}
