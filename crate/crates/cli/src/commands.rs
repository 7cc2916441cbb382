//! One function per subcommand. Each returns a summary of what it wrote so
//! callers (and tests) can inspect results without re-reading files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use robustcast_core::checkpoint::Checkpoint;
use robustcast_core::data::{self, TimeSeriesFrame};
use robustcast_core::metrics::Metrics;
use robustcast_core::perturb::{self, PerturbKind, PerturbationSpec};
use robustcast_core::predictor::TrainReport;
use robustcast_core::tensor::Op;
use robustcast_core::verify::{self, VerifyOptions, VerifyReport};
use serde::Serialize;

use crate::config::{ApplyTo, BenchMode, RunConfig};
use crate::pipeline::{self, Splits};
use crate::{CliError, Overrides, Result, OUT_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BENCH_CSV: &str = "robustbench.csv";
pub const BENCH_JSON: &str = "robustbench.json";

/// Config with command-line overrides applied, plus the output directory.
pub fn resolve(o: &Overrides) -> Result<(RunConfig, PathBuf)> {
    let path = o.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = o.tau {
        cfg.model.tau = tau;
    }
    if let Some(h) = &o.horizons {
        cfg.eval.horizons = h.clone();
    }
    if let Some(kind) = o.perturb_kind {
        cfg.robustbench.kinds = vec![kind];
    }
    if let Some(grid) = &o.level_grid {
        cfg.robustbench.grid = Some(grid.clone());
    }
    cfg.apply_seed();
    cfg.validate(true)?;
    let out = output_dir(o.out.as_deref(), cfg.out.as_deref());
    Ok((cfg, out))
}

/// `--out`, then the config's `out`, then `$ROBUSTCAST_OUT`, then `./runs`.
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(robustcast_core::Error::from)?;
    text.push('\n');
    write_file(path, text)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// Resolved config without the output location, so reruns into different
/// directories still produce identical snapshots.
fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let snapshot = RunConfig { out: None, ..cfg.clone() };
    write_file(&dir.join(RESOLVED_CONFIG_FILE), snapshot.to_toml())
}

fn load_frame(cfg: &RunConfig) -> Result<TimeSeriesFrame> {
    Ok(data::load_csv(&cfg.data.path)?)
}

fn perturbation(cfg: &RunConfig) -> Option<(&PerturbationSpec, ApplyTo)> {
    cfg.perturb.as_ref().map(|p| (&p.spec, p.apply_to))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    pub initial_val_mae: Option<f64>,
    pub final_val_mae: Option<f64>,
    #[serde(flatten)]
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub horizons: Vec<HorizonSummary>,
}

pub fn train(o: &Overrides, w: &mut dyn Write) -> Result<TrainOutcome> {
    let (cfg, out) = resolve(o)?;
    create_dir(&out)?;
    let frame = load_frame(&cfg)?;
    let splits = pipeline::prepare(&frame, &cfg, pipeline::min_split_len(&cfg), perturbation(&cfg))?;

    let mut models = Vec::new();
    let mut summaries = Vec::new();
    let mut trace = csv_writer(&out.join(LOSS_TRACE_FILE))?;
    trace.write_record(["epoch", "horizon", "train_loss", "val_loss"])?;
    for h in cfg.horizons() {
        let fitted = pipeline::fit(&cfg, h, &splits)?;
        for r in &fitted.report.trace {
            trace.write_record([r.epoch.to_string(), h.to_string(), r.train_loss.to_string(), fmt_opt(r.val_loss)])?;
        }
        let final_val_mae = match fitted.report.best_epoch {
            Some(e) => fitted.report.trace[e].val_loss,
            None => fitted.initial_val_mae,
        };
        let _ = writeln!(
            w,
            "horizon {h}: val MAE {} -> {} over {} epochs",
            fmt_opt(fitted.initial_val_mae),
            fmt_opt(final_val_mae),
            fitted.report.trace.len()
        );
        summaries.push(HorizonSummary {
            horizon: h,
            initial_val_mae: fitted.initial_val_mae,
            final_val_mae,
            report: fitted.report,
        });
        models.push(fitted.model);
    }
    trace.flush().map_err(CliError::io(out.join(LOSS_TRACE_FILE)))?;

    Checkpoint::from_models(&models).save(out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summaries)?;
    write_resolved(&cfg, &out)?;
    let _ = writeln!(w, "wrote {}", out.display());
    Ok(TrainOutcome { out, horizons: summaries })
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub metrics: Vec<(String, f64)>,
}

/// Metric rows reported for one horizon.
fn metric_rows(m: &Metrics, extended: bool) -> Vec<(String, f64)> {
    m.entries()
        .into_iter()
        .filter(|(name, _)| extended || matches!(*name, "mse" | "mae"))
        .map(|(name, v)| (name.to_string(), v))
        .collect()
}

pub fn eval(o: &Overrides, checkpoint: Option<&Path>, w: &mut dyn Write) -> Result<Vec<HorizonMetrics>> {
    let (cfg, out) = resolve(o)?;
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let available = ckpt.horizons();
    let requested = cfg.horizons();
    let missing: Vec<usize> = requested.iter().copied().filter(|h| !available.contains(h)).collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint {} has no model for horizons {missing:?}; available horizons: {available:?}",
            ckpt_path.display()
        )));
    }
    create_dir(&out)?;
    let frame = load_frame(&cfg)?;

    let mut results = Vec::new();
    for h in requested {
        let model = ckpt.model_for(h)?;
        let min_len = model.config.lookback + h;
        let splits = pipeline::prepare(&frame, &cfg, min_len, perturbation(&cfg))?;
        let m = pipeline::score(&model, &splits, &cfg.eval)?;
        results.push(HorizonMetrics {
            horizon: h,
            metrics: metric_rows(&m, cfg.eval.extended),
        });
    }

    let mut csv = csv_writer(&out.join(METRICS_CSV))?;
    csv.write_record(["horizon", "metric", "value"])?;
    for r in &results {
        for (name, v) in &r.metrics {
            csv.write_record([r.horizon.to_string(), name.clone(), v.to_string()])?;
            let _ = writeln!(w, "horizon {:>4}  {name:<7} {v:.6}", r.horizon);
        }
    }
    csv.flush().map_err(CliError::io(out.join(METRICS_CSV)))?;
    let json: Vec<_> = results
        .iter()
        .map(|r| {
            let metrics: serde_json::Map<_, _> = r.metrics.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
            serde_json::json!({ "horizon": r.horizon, "metrics": metrics })
        })
        .collect();
    write_json(&out.join(METRICS_JSON), &json)?;
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelReport {
    pub name: String,
    pub modified: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbReport {
    pub spec: PerturbationSpec,
    pub rows: usize,
    pub channels: Vec<ChannelReport>,
}

/// Sidecar written next to a corrupted CSV.
pub fn report_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    output.with_file_name(name)
}

pub fn perturb(o: &Overrides, input: &Path, output: &Path, level: Option<f64>, w: &mut dyn Write) -> Result<PerturbReport> {
    let mut spec = match &o.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let section = cfg.perturb.ok_or_else(|| CliError::Config(format!("{}: no [perturb] section", path.display())))?;
            section.spec
        }
        None => {
            let kind = o
                .perturb_kind
                .ok_or_else(|| CliError::Config("either --config or --perturb-kind is required".into()))?;
            PerturbationSpec::new(kind)
        }
    };
    if let Some(kind) = o.perturb_kind {
        spec.kind = kind;
    }
    if let Some(seed) = o.seed {
        spec.seed = seed;
    }
    if let Some(level) = level {
        spec = spec.with_level(level)?;
    }
    spec.validate()?;

    let frame = data::load_csv(input)?;
    let (corrupted, modified) = pipeline::corrupt(&frame, &spec)?;
    data::save_csv(&corrupted, output)?;
    let report = PerturbReport {
        rows: frame.len(),
        channels: frame
            .channels
            .iter()
            .zip(modified)
            .map(|(name, modified)| ChannelReport { name: name.clone(), modified })
            .collect(),
        spec,
    };
    write_json(&report_path(output), &report)?;
    for c in &report.channels {
        let _ = writeln!(w, "{:<16} {} of {} points modified", c.name, c.modified, report.rows);
    }
    Ok(report)
}

/// One cell of the robustness table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: PerturbKind,
    pub horizon: usize,
    /// `ori`, `5%`, `3`, or `avg`.
    pub label: String,
    /// `None` on the average row.
    pub level: Option<f64>,
    pub mse: f64,
    pub mae: f64,
}

fn bench_grid(cfg: &RunConfig, kind: PerturbKind) -> Vec<f64> {
    cfg.robustbench.grid.clone().unwrap_or_else(|| kind.default_grid())
}

fn bench_spec(cfg: &RunConfig, kind: PerturbKind, level: f64) -> Result<PerturbationSpec> {
    let base = match &cfg.perturb {
        Some(p) if p.spec.kind == kind => p.spec.clone(),
        _ => PerturbationSpec::new(kind),
    };
    let mut spec = base.with_level(level)?;
    spec.seed = perturb::level_seed(cfg.seed, level);
    spec.validate()?;
    Ok(spec)
}

/// Mean over the corrupted levels; level 0 is reported but not averaged
/// unless it is the only level.
fn average(kind: PerturbKind, horizon: usize, rows: &[BenchRow]) -> BenchRow {
    let corrupted: Vec<&BenchRow> = rows.iter().filter(|r| r.level != Some(0.0)).collect();
    let pool: Vec<&BenchRow> = if corrupted.is_empty() { rows.iter().collect() } else { corrupted };
    let n = pool.len() as f64;
    BenchRow {
        kind,
        horizon,
        label: "avg".into(),
        level: None,
        mse: pool.iter().map(|r| r.mse).sum::<f64>() / n,
        mae: pool.iter().map(|r| r.mae).sum::<f64>() / n,
    }
}

pub fn robustbench(o: &Overrides, w: &mut dyn Write) -> Result<Vec<BenchRow>> {
    let (cfg, out) = resolve(o)?;
    create_dir(&out)?;
    let frame = load_frame(&cfg)?;
    let min_len = pipeline::min_split_len(&cfg);
    let horizons = cfg.horizons();

    // Clean-trained models, only needed when the test split alone is corrupted.
    let clean_models = match cfg.robustbench.mode {
        BenchMode::Retrain => Vec::new(),
        BenchMode::TestOnly => {
            let clean = pipeline::prepare(&frame, &cfg, min_len, None)?;
            horizons
                .iter()
                .map(|&h| pipeline::fit(&cfg, h, &clean).map(|f| f.model))
                .collect::<Result<Vec<_>>>()?
        }
    };

    let mut table = Vec::new();
    for &kind in &cfg.robustbench.kinds {
        let grid = bench_grid(&cfg, kind);
        let mut per_horizon: Vec<Vec<BenchRow>> = vec![Vec::new(); horizons.len()];
        for &level in &grid {
            let spec = (level != 0.0).then(|| bench_spec(&cfg, kind, level)).transpose()?;
            let splits: Splits = match (cfg.robustbench.mode, &spec) {
                (_, None) => pipeline::prepare(&frame, &cfg, min_len, None)?,
                (BenchMode::Retrain, Some(s)) => pipeline::prepare(&frame, &cfg, min_len, Some((s, cfg.robustbench.apply_to)))?,
                (BenchMode::TestOnly, Some(s)) => pipeline::prepare(&frame, &cfg, min_len, Some((s, ApplyTo::Full)))?,
            };
            for (i, &h) in horizons.iter().enumerate() {
                let started = Instant::now();
                let metrics = match cfg.robustbench.mode {
                    BenchMode::Retrain => pipeline::score(&pipeline::fit(&cfg, h, &splits)?.model, &splits, &cfg.eval)?,
                    BenchMode::TestOnly => pipeline::score(&clean_models[i], &splits, &cfg.eval)?,
                };
                info!("{kind} level {level} horizon {h}: mse {:.6} ({:.1?})", metrics.mse, started.elapsed());
                per_horizon[i].push(BenchRow {
                    kind,
                    horizon: h,
                    label: kind.level_label(level),
                    level: Some(level),
                    mse: metrics.mse,
                    mae: metrics.mae,
                });
            }
        }
        for (i, mut rows) in per_horizon.into_iter().enumerate() {
            let avg = average(kind, horizons[i], &rows);
            rows.push(avg);
            table.extend(rows);
        }
    }

    let mut csv = csv_writer(&out.join(BENCH_CSV))?;
    csv.write_record(["kind", "horizon", "metric", "level", "value"])?;
    for metric in ["mse", "mae"] {
        for r in &table {
            let v = if metric == "mse" { r.mse } else { r.mae };
            csv.write_record([r.kind.name().to_string(), r.horizon.to_string(), metric.into(), r.label.clone(), v.to_string()])?;
        }
    }
    csv.flush().map_err(CliError::io(out.join(BENCH_CSV)))?;
    write_json(&out.join(BENCH_JSON), &table)?;
    write_resolved(&cfg, &out)?;
    for r in &table {
        let _ = writeln!(w, "{:<18} {:>4} {:>5}  mse {:.6}  mae {:.6}", r.kind.name(), r.horizon, r.label, r.mse, r.mae);
    }
    Ok(table)
}

pub fn verify(seed: u64, inject_fault: Option<&str>, w: &mut dyn Write) -> Result<VerifyReport> {
    let fault = inject_fault
        .map(|name| {
            Op::from_name(name).ok_or_else(|| {
                let names: Vec<_> = Op::DIFFERENTIABLE.iter().map(|o| o.name()).collect();
                CliError::Config(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
            })
        })
        .transpose()?;
    let started = Instant::now();
    let report = verify::run(&VerifyOptions { seed, fault });
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(w, "{status} {:<24} {} ({:.2?})", c.name, c.detail, c.elapsed);
    }
    let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    let _ = writeln!(
        w,
        "{} of {} checks passed in {:.1?}",
        report.checks.len() - failed.len(),
        report.checks.len(),
        started.elapsed()
    );
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Failed(format!("verification failed: {}", failed.join(", "))))
    }
}
