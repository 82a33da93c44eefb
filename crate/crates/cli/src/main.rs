//! `mods`: generate synthetic data, train, evaluate, check gradients and
//! inspect modality weights.
//!
//! Exit status: 0 success, 2 invalid configuration, 3 data or checkpoint
//! error, 4 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliResult;

#[derive(Parser)]
#[command(name = "mods", version, about = "Primary-modality-centric multimodal fusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and gradient checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Hyperparameter preset: mosi-like, mosei-like, sims-like, simsv2-like.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Ablation flag; repeatable or comma-separated (no_gdc, no_caps,
    /// no_pcca, fixed_l, fixed_a, fixed_v).
    #[arg(long, global = true)]
    ablation: Vec<String>,
}

#[derive(Args, Clone, Debug, Default)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to evaluate.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset to --out.
    GenData,
    /// Train on the `train` split, select by `val` MAE.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a `last.ckpt`; only max_epochs and patience may change.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write metrics.json and selections.csv for a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every module at small dimensions.
    Gradcheck {
        /// Offsets the analytic gradient of the named parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print per-sample modality weights and chosen primary.
    InspectWeights {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let (data, checkpoint) = match &cli.command {
        Command::Train { data, .. } => (Some(data), None),
        Command::Eval { data, checkpoint } | Command::InspectWeights { data, checkpoint } => {
            (Some(data), checkpoint.clone())
        }
        Command::GenData | Command::Gradcheck { .. } => (None, None),
    };
    let c = cli.common;
    let o = Overrides {
        preset: c.preset,
        seed: c.seed,
        out: c.out,
        ablation: c.ablation,
        data: data.and_then(|d| d.data.clone()),
        split: data.and_then(|d| d.split.clone()),
        checkpoint,
    };
    let cfg = RunConfig::load(c.config.as_deref(), &o)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { resume, .. } => commands::train_cmd(&cfg, resume.as_deref()),
        Command::Eval { .. } => commands::eval_cmd(&cfg),
        Command::Gradcheck { corrupt } => commands::gradcheck_cmd(&cfg, corrupt.as_deref()),
        Command::InspectWeights { .. } => commands::inspect_weights(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mods: {e}");
            e.exit_code()
        }
    }
}
