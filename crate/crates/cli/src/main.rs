//! `nvqr`: train, calibrate, evaluate and sweep neural vector quantile
//! regression models from TOML configs.

mod commands;
mod config;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, GenDataArgs};

#[derive(Parser)]
#[command(name = "nvqr", version, about = "Neural vector quantile regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (sweep cells run concurrently up to this limit).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its artifact, epoch log and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip the run when the output directory already holds a finished run.
        #[arg(long)]
        resume: bool,
    },
    /// Calibrate and evaluate conformal sets for a trained model.
    Conformal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train and score a grid of datasets, methods, dimensions and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Reuse finished cells of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Write a synthetic dataset as CSV, or fit the reference potential of a convex variant.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Fit a reference potential for a convex-* dataset and save it here.
        #[arg(long)]
        fit_reference: Option<PathBuf>,
    },
    /// Compare a trained model with the true conditional law.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if !matches!(cli.command, Command::Sweep { .. }) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed, common.out.as_deref())?;
            commands::cmd_train(&cfg, resume)
        }
        Command::Conformal { common, model } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed, None)?;
            commands::cmd_conformal(&cfg, &model, common.out.as_deref())
        }
        Command::Sweep { common, resume } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed, common.out.as_deref())?;
            commands::cmd_sweep(&cfg, resume, workers)
        }
        Command::GenData {
            common,
            dataset,
            n,
            fit_reference,
        } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed, None)?;
            commands::cmd_gen_data(
                &cfg,
                GenDataArgs {
                    dataset: dataset.as_deref(),
                    n,
                    out: common.out.as_deref(),
                    fit_reference: fit_reference.as_deref(),
                },
            )
        }
        Command::Metrics { common, model } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed, None)?;
            commands::cmd_metrics(&cfg, &model, common.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
