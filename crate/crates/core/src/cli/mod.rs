//! Sweep configuration, orchestration and report tables behind the
//! `dsrc-rgb` binary.

use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

pub mod config;
pub mod report;
pub mod sweep;

pub use config::{ConfigError, Figure, RgbMethod, SweepConfig, WifiMode};
pub use report::{emit_report, write_report, Table};
pub use sweep::{run_sweep, run_sweep_with, RunId, RunObserver, SweepOptions, SweepOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

/// Sweep DSRC broadcast outcomes and mean RGB over density, IBI, CW and
/// Wi-Fi presence.
#[derive(Debug, Parser)]
#[command(name = "dsrc-rgb", version)]
pub struct Args {
    /// TOML sweep configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seeds per grid point, overriding `seeds`.
    #[arg(long, value_name = "N")]
    pub seeds: Option<u32>,
    /// Worker threads, overriding `workers`.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Keep grid points already completed in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Write one trace file per run.
    #[arg(long)]
    pub trace: bool,
    /// Restrict the grid to the axes of one figure.
    #[arg(long, value_name = "3|4|5|all", default_value = "all")]
    pub figure: Figure,
}

/// Reads the config named by `args` and applies the flag overrides.
pub fn resolve_config(args: &Args) -> Result<SweepConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            SweepConfig::from_toml(&text)?
        }
        None => SweepConfig::default(),
    };
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    config.trace |= args.trace;
    config.validate()?;
    Ok(config)
}

/// Full command: resolve, sweep, write tables.
pub fn run(args: &Args) -> Result<SweepOutcome, CliError> {
    let config = resolve_config(args)?;
    eprintln!(
        "{} runs planned over {} grid points -> {}",
        config.planned_runs(args.figure),
        config.grid(args.figure).len(),
        config.out_dir.display()
    );
    let options = SweepOptions {
        figure: args.figure,
        resume: args.resume,
        progress: true,
    };
    let outcome = run_sweep(&config, &options)?;
    let tables = emit_report(&outcome.summaries, &config)?;
    write_report(&tables, &config.out_dir.join("report"))?;
    Ok(outcome)
}
