//! Shared steps of the config-driven commands: load, corrupt, split, fit and
//! score.

use log::info;
use ndarray::{Array2, Axis};
use robustcast_core::data::{self, TimeSeriesFrame, WindowPair};
use robustcast_core::metrics::{MetricAccumulator, Metrics};
use robustcast_core::perturb::{self, PerturbationSpec};
use robustcast_core::predictor::{self, Model, TrainReport};

use crate::config::{ApplyTo, EvalSection, MetricScale, RunConfig};
use crate::Result;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TimeSeriesFrame,
    pub val: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
}

/// Corrupts a frame (`N × L`) with `spec`.
pub fn corrupt(frame: &TimeSeriesFrame, spec: &PerturbationSpec) -> Result<(TimeSeriesFrame, Vec<usize>)> {
    let out = perturb::apply(&frame.time_major(), spec)?;
    Ok((frame.with_values(out.data.reversed_axes())?, out.modified))
}

/// Chronological split, optionally corrupting the whole series first or only
/// the training part afterwards.
pub fn prepare(frame: &TimeSeriesFrame, cfg: &RunConfig, min_len: usize, perturbation: Option<(&PerturbationSpec, ApplyTo)>) -> Result<Splits> {
    let source = match perturbation {
        Some((spec, ApplyTo::Full)) => corrupt(frame, spec)?.0,
        _ => frame.clone(),
    };
    let (mut train, val, test) = data::split(&source, &cfg.data.split, min_len)?;
    if let Some((spec, ApplyTo::Train)) = perturbation {
        train = corrupt(&train, spec)?.0;
    }
    Ok(Splits { train, val, test })
}

/// Longest span any requested horizon needs in every split part.
pub fn min_split_len(cfg: &RunConfig) -> usize {
    cfg.model.lookback + cfg.horizons().into_iter().max().unwrap_or(cfg.model.horizon)
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    pub report: TrainReport,
    /// Validation MAE of the freshly initialized model.
    pub initial_val_mae: Option<f64>,
}

pub fn fit(cfg: &RunConfig, horizon: usize, splits: &Splits) -> Result<Fitted> {
    let mcfg = cfg.model_for(horizon);
    let lookback = mcfg.lookback;
    let model = Model::new(mcfg)?;
    let train_w = data::windows(&splits.train, lookback, horizon, cfg.data.stride);
    let val_w = data::windows(&splits.val, lookback, horizon, 1);
    let opts = cfg.train_options();
    let initial_val_mae = if val_w.is_empty() {
        None
    } else {
        Some(predictor::evaluate_loss(&model, &val_w, opts.batch_size)?)
    };
    info!(
        "horizon {horizon}: {} train / {} val windows, {} epochs",
        train_w.len(),
        val_w.len(),
        opts.epochs
    );
    let report = predictor::train(&model, &train_w, &val_w, &opts)?;
    Ok(Fitted {
        model,
        report,
        initial_val_mae,
    })
}

/// Per-channel `(mean, std)` of a frame, used for normalized-scale metrics.
fn channel_moments(frame: &TimeSeriesFrame) -> Vec<(f64, f64)> {
    frame
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

fn rescale(x: &mut Array2<f64>, moments: &[(f64, f64)]) {
    for (mut row, &(m, s)) in x.rows_mut().into_iter().zip(moments) {
        let s = if s > 0.0 { s } else { 1.0 };
        row.mapv_inplace(|v| (v - m) / s);
    }
}

/// Metrics of `model` over every test window (stride 1, no drop-last). MASE
/// is scaled by the seasonal-naive error on the training split.
pub fn score(model: &Model, splits: &Splits, eval: &EvalSection) -> Result<Metrics> {
    let cfg = &model.config;
    let opts = eval.metric_options();
    let windows = data::windows(&splits.test, cfg.lookback, cfg.horizon, 1);
    let moments = match eval.scale {
        MetricScale::Raw => None,
        MetricScale::Normalized => Some(channel_moments(&splits.train)),
    };
    let mut acc = MetricAccumulator::new(splits.test.n_channels(), &opts);
    for chunk in windows.chunks(EVAL_BATCH) {
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let (x, y) = data::stack(&refs);
        let pred = model.predict_batch(&x)?;
        for (p, t) in pred.axis_iter(Axis(0)).zip(y.axis_iter(Axis(0))) {
            let (mut p, mut t) = (p.to_owned(), t.to_owned());
            if let Some(m) = &moments {
                rescale(&mut p, m);
                rescale(&mut t, m);
            }
            acc.push(&p, &t)?;
        }
    }
    let mut context = splits.train.values.clone();
    if let Some(m) = &moments {
        rescale(&mut context, m);
    }
    Ok(acc.finish(Some(&context), &opts)?)
}
