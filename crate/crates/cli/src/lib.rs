//! Command-line driver for the contrastive goal-reaching toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::CurveRequest;
use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "crl", version, about = "Contrastive goal-reaching representations: generate, train, verify, benchmark")]
pub struct Cli {
    /// TOML config layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; replaces every section seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    /// Config override, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus and its occupancy oracle table.
    Gen,
    /// Train the encoders (and optionally the flow head) into a checkpoint.
    Train {
        /// Train on an existing corpus file instead of generating one.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run the verification suites against a checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Critic values along one trajectory under a correct and a wrong goal.
    ValueCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Index into the corpus trajectories; defaults to the first held-out one.
        #[arg(long)]
        trajectory: Option<usize>,
        #[arg(long)]
        correct: Option<u32>,
        #[arg(long)]
        wrong: Option<u32>,
    },
    /// Dense vs block-sparse attention timing table.
    Bench,
    /// Sample an action chunk from the checkpoint's flow head.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: usize,
        #[arg(long)]
        goal: u32,
        /// Euler steps; defaults to the trained `sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Verify { .. } => "verify",
            Command::ValueCurve { .. } => "value-curve",
            Command::Bench => "bench",
            Command::Sample { .. } => "sample",
        }
    }
}

/// Resolves the config, creates the run directory and dispatches.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let dir = commands::create_run_dir(&cli.out, cli.command.name(), &config)?;
    log::info!("run directory {}", dir.display());
    match &cli.command {
        Command::Gen => commands::cmd_gen(&config, &dir)?,
        Command::Train { corpus } => commands::cmd_train(&config, &dir, corpus.as_deref())?,
        Command::Verify { checkpoint, corpus } => commands::cmd_verify(&config, &dir, checkpoint, corpus.as_deref())?,
        Command::ValueCurve {
            checkpoint,
            corpus,
            trajectory,
            correct,
            wrong,
        } => commands::cmd_value_curve(
            &config,
            &dir,
            checkpoint,
            corpus.as_deref(),
            &CurveRequest {
                trajectory: *trajectory,
                correct: *correct,
                wrong: *wrong,
            },
        )?,
        Command::Bench => commands::cmd_bench(&config, &dir)?,
        Command::Sample {
            checkpoint,
            state,
            goal,
            steps,
        } => commands::cmd_sample(&config, &dir, checkpoint, *state, *goal, *steps)?,
    }
    Ok(dir)
}
