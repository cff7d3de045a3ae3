//! Command-line front end: every command reads an [`ExperimentConfig`], writes
//! its outputs plus a snapshot of the effective configuration into the output
//! directory, and appends evaluation rows to `metrics.csv` there.

mod commands;
mod config;

pub use commands::{
    cmd_evaluate, cmd_phantom, cmd_reconstruct, cmd_simulate, cmd_sweep_lambda, cmd_train, cmd_tv, MetricsRow,
    ReconstructMode,
};
pub use config::{AcousticsSection, ExperimentConfig, PathsSection, SweepSection, VolumeSection};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nfr", version, about = "Photoacoustic reconstruction with a normalizing-flow prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serial execution with a fixed reduction order (the only mode this build
    /// has; accepted for compatibility and recorded in the snapshot).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `volume.count` phantoms and a seed manifest.
    Phantom,
    /// Simulate noisy measurements of `paths.truth`.
    Simulate,
    /// Train the flow prior and store a checkpoint with its reference constant.
    Train,
    /// Reconstruct from `paths.measurements` with the prior in `paths.checkpoint`.
    Reconstruct {
        /// Fixed regularization weight (a single inner loop).
        #[arg(long, conflicts_with = "adaptive")]
        lambda: Option<f64>,
        /// Adaptive weight selection (the default).
        #[arg(long)]
        adaptive: bool,
    },
    /// Total-variation baseline.
    Tv {
        /// Fixed TV weight; otherwise the grid is swept against `paths.truth`
        /// when given, else `baselines.lambda` is used.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fixed-weight reconstructions over `sweep.lambda_grid`.
    SweepLambda,
    /// Metrics of `paths.reconstruction` against `paths.truth`.
    Evaluate,
}

/// Loads the configuration and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Phantom => cmd_phantom(&cfg).map(|_| ()),
        Command::Simulate => cmd_simulate(&cfg).map(|_| ()),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Reconstruct { lambda, .. } => {
            let mode = match lambda {
                Some(l) => ReconstructMode::Fixed(*l),
                None => ReconstructMode::Adaptive,
            };
            cmd_reconstruct(&cfg, mode).map(|_| ())
        }
        Command::Tv { lambda } => cmd_tv(&cfg, *lambda).map(|_| ()),
        Command::SweepLambda => cmd_sweep_lambda(&cfg).map(|_| ()),
        Command::Evaluate => cmd_evaluate(&cfg).map(|_| ()),
    }
}
