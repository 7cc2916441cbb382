//! Batch front end for the forecaster: train, evaluate, corrupt, sweep
//! robustness levels and run the self-verification suite.
//!
//! Every command is a pure function of its config and seed; all artifacts
//! are written without timestamps so reruns are byte-identical.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "ROBUSTCAST_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] robustcast_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use robustcast_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_) | E::SplitTooShort { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "robustcast", version, about = "Robust multivariate time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the config-driven commands.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Falls back to the config's `out`, then $ROBUSTCAST_OUT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Token filter threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Restricts perturbation to one kind.
    #[arg(long, value_parser = parse_kind)]
    pub perturb_kind: Option<robustcast_core::perturb::PerturbKind>,
    /// Comma-separated sweep levels.
    #[arg(long, value_delimiter = ',')]
    pub level_grid: Option<Vec<f64>>,
}

fn parse_kind(s: &str) -> std::result::Result<robustcast_core::perturb::PerturbKind, String> {
    use robustcast_core::perturb::PerturbKind;
    PerturbKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = PerturbKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown perturbation kind {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per horizon; writes checkpoint.json, loss_trace.csv and config.resolved.toml.
    Train(Overrides),
    /// Score a checkpoint on the test split; writes metrics.csv and metrics.json.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint to evaluate; defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Corrupt a CSV file and write a sidecar report of modified counts.
    Perturb {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Strength of the selected kind (ratio, or segment count for distribution shift).
        #[arg(long)]
        level: Option<f64>,
    },
    /// Train and evaluate at every level of each perturbation grid.
    Robustbench(Overrides),
    /// Run gradient checks and model/perturbation invariants.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Runs one command, writing human-readable progress to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Train(o) => commands::train(&o, stdout).map(drop),
        Command::Eval { overrides, checkpoint } => commands::eval(&overrides, checkpoint.as_deref(), stdout).map(drop),
        Command::Perturb {
            overrides,
            input,
            output,
            level,
        } => commands::perturb(&overrides, &input, &output, level, stdout).map(drop),
        Command::Robustbench(o) => commands::robustbench(&o, stdout).map(drop),
        Command::Verify { seed, inject_fault } => commands::verify(seed, inject_fault.as_deref(), stdout).map(drop),
    }
}
