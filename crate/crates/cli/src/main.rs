//! `cvrsim`: run delayed-feedback CVR experiments from a TOML config.
//!
//! Exit codes: 0 on success, 1 on I/O or other runtime failures, 2 for an
//! invalid config or a missing input, 3 when training hits a non-finite value.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Precision;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cvr_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        use cvr_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::NonFinite { .. }) => 3,
            CliError::Core(E::Schedule(_) | E::Generator(_) | E::SimConfig(_) | E::LearnerSpec(_)) => 2,
            CliError::Core(E::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cvrsim", version, about = "Delayed-feedback CVR simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the streaming simulation for every seed in the config.
    Run(RunArgs),
    /// Write the synthetic stream of a config as a canonical log.
    Gen(GenArgs),
    /// Summarize conversion delays and feedback rates of a log.
    Stats(StatsArgs),
    /// Print the best-task table of a finished run.
    Besttask(BesttaskArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Run directory, overriding `output`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Comma-separated seeds, overriding `seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Canonical log to read instead of the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Clock step in seconds.
    #[arg(long)]
    pub step: Option<i64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Also write the per-step relative log loss series (`plot.csv`).
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    pub config: PathBuf,
    /// Generator seed; the first config seed by default.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output log; `<output>/log-seed-<seed>.tsv` by default. A `.gz`
    /// extension compresses.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LogFormat {
    Canonical,
    Criteo,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    pub log: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: LogFormat,
    /// Comma-separated task delays in seconds; 1, 7, 14, 21, 30 days by default.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<i64>>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, clap::Args)]
pub struct BesttaskArgs {
    pub run_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Gen(a) => commands::gen(a),
        Command::Stats(a) => commands::stats(a),
        Command::Besttask(a) => commands::besttask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
