//! Command-line driver: `simulate`, `prep`, `fit`, `predict`, `evaluate`,
//! `compare`, plus `replay` to re-run a stage from its manifest.

mod artifacts;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
pub use commands::{execute, score};
pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "stnngp", version, about = "Spatiotemporal NNGP modelling of station time series")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for all stage outputs [default: out].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Build a model-ready dataset from raw station series.
    Prep,
    /// Split the dataset and sample the posterior.
    Fit,
    /// Predictive draws for held-out stations and forecast days.
    Predict,
    /// Score predictions against the validation cells.
    Evaluate,
    /// Fit, predict and score several models on the same split.
    Compare,
    /// Re-run the stage recorded in a manifest with its configuration.
    Replay { manifest: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Prep => "prep",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Compare => "compare",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Caps the worker pool at `STGP_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STGP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("STGP_THREADS=`{v}` is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config("STGP_THREADS must be positive".into()));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    configure_threads()?;
    if let Command::Replay { manifest } = &cli.command {
        let recorded = RunManifest::read(manifest)?;
        let changed = recorded.changed_inputs();
        if !changed.is_empty() {
            log::warn!("inputs changed since the recorded run: {}", changed.join(", "));
        }
        let cfg = RunConfig::from_map(&recorded.config)?;
        let out = cli.out_dir.clone().unwrap_or(recorded.out_dir.clone());
        return execute(&recorded.command, &cfg, &out);
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    execute(cli.command.name(), &cfg, &out)
}
