//! Command-line driver: argument registry, run configuration and the four
//! workflows (`synth`, `train`, `eval`, `infer`).

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_eval, cmd_infer, cmd_synth, cmd_train, load_dataset, threads_from_env, CliError};
pub use config::{apply_override, DataConfig, DataSource, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "spliif", version, about = "Downscale sparse station observations onto a topography-aware field")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world: station CSV, topography ASC and manifest.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint against the IDW baseline on held-out stations.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained model checkpoint.
        #[arg(long, value_name = "PATH", required_unless_present = "baseline_only")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the baseline alone; no improvement column is written.
        #[arg(long)]
        baseline_only: bool,
    },
    /// Predict at query points or over the whole patch grid.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained model checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Input station CSV (one time slice).
        #[arg(long, value_name = "PATH")]
        stations: PathBuf,
        /// CSV with `lon,lat` columns to predict at.
        #[arg(long, value_name = "PATH", required_unless_present = "grid", conflicts_with = "grid")]
        queries: Option<PathBuf>,
        /// Predict every pixel of the patch and write PGM maps.
        #[arg(long)]
        grid: bool,
        /// Patch origin in world pixels as `ROW,COL`.
        #[arg(long, value_name = "ROW,COL", default_value = "0,0")]
        origin: String,
    },
}
