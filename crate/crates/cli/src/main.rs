use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

/// Simulate spiking networks, build Granger priors, train and evaluate the
/// sheaf neural ODE forecaster.
#[derive(Debug, Parser)]
#[command(name = "sheaf-ode", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate paired unperturbed/perturbed records and write split window sets.
    Simulate,
    /// Build the Granger prior graph from a window set.
    Prior {
        #[arg(long)]
        windows: PathBuf,
    },
    /// Train a model on a window set over a prior graph.
    Train {
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        val_windows: Option<PathBuf>,
        #[arg(long)]
        prior: PathBuf,
    },
    /// Forecast the horizon of every window in a set.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        windows: PathBuf,
    },
    /// Score a checkpoint trained on unperturbed data on perturbed windows.
    PerturbEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        windows: PathBuf,
    },
    /// Score stored forecasts against a window set's horizons.
    Metrics {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        targets: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Schema(format!("--threads: {e}")))?;
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Schema("--out is required".into()))?;
    let explicit = cli.config.is_some() || cli.seed.is_some();
    let load = || RunConfig::load(cli.config.as_deref(), cli.seed);
    let optional = || -> Result<Option<RunConfig>, CliError> { if explicit { load().map(Some) } else { Ok(None) } };
    match &cli.command {
        Command::Simulate => commands::simulate(&load()?, &out).map(drop),
        Command::Prior { windows } => commands::prior(&load()?, windows, &out).map(drop),
        Command::Train {
            windows,
            val_windows,
            prior,
        } => commands::train_cmd(&load()?, windows, val_windows.as_deref(), prior, &out).map(drop),
        Command::Forecast { checkpoint, windows } => {
            commands::forecast(optional()?.as_ref(), checkpoint, windows, &out).map(drop)
        }
        Command::PerturbEval { checkpoint, windows } => {
            commands::perturb_eval(optional()?.as_ref(), checkpoint, windows, &out).map(drop)
        }
        Command::Metrics { forecasts, targets } => {
            commands::metrics(optional()?.as_ref(), forecasts, targets, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
