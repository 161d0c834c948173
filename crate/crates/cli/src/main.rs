//! lordd: dataset preparation, adapter training and TWP evaluation for
//! dual low-rank dialect adaptation, driven by key=value config files.
//!
//! Exit codes: 0 success, 1 runtime failure or partially failed ablation,
//! 2 usage/config errors.

mod commands;
mod config;
mod manifest;
mod pipeline;

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, KeyValueFile};

/// Marker for errors that should exit with the usage/config code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

#[derive(Parser)]
#[command(name = "lordd", version, about = "Dual low-rank adapter dialect adaptation pipeline")]
struct Cli {
    /// Experiment config file (key = value with [section] headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the experiment seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for ablation cells
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the deterministic MD-3-style fixture corpora into --out
    Fixture,
    /// Mask every subset found under the data root into --out/masked
    Prepare {
        /// Fail unless per-split counts match this expectation file
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Build the pseudo-parallel contrastive corpus into --out/pairs.jsonl
    Pairs,
    /// Train one adapter stage
    Train {
        /// Which adapter to train
        #[arg(long, value_parser = ["task", "dialect"])]
        stage: String,
        /// Dialect checkpoint to stack under the task adapter
        #[arg(long)]
        dialect_checkpoint: Option<PathBuf>,
    },
    /// Run TWP over the test split and emit predictions plus a report row
    Eval {
        /// Task checkpoint directory (default --out/task-checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dialect checkpoint directory (default --out/dialect-checkpoint)
        #[arg(long)]
        dialect_checkpoint: Option<PathBuf>,
        /// Extra row.json files; with --skyline/--in-dialect a full report is emitted
        #[arg(long)]
        rows: Vec<PathBuf>,
        /// Skyline group key: method|training_data|test_dialect
        #[arg(long)]
        skyline: Option<String>,
        /// In-dialect baseline group keys (one per test dialect)
        #[arg(long = "in-dialect")]
        in_dialect: Vec<String>,
    },
    /// Combine row files into report.json and an aligned report.txt
    Report {
        #[arg(long, required = true)]
        rows: Vec<PathBuf>,
        /// Skyline group key: method|training_data|test_dialect
        #[arg(long)]
        skyline: String,
        /// In-dialect baseline group keys (one per test dialect)
        #[arg(long = "in-dialect")]
        in_dialect: Vec<String>,
        /// JSON array of published annotation values to reconcile against
        #[arg(long)]
        published: Option<PathBuf>,
    },
    /// Run a config grid end to end; failed cells do not stop the rest
    Ablate {
        /// Grid file with [grid] base/us_fractions/dialect_adapter
        #[arg(long)]
        grid: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("this command needs --config"))?;
    let file = KeyValueFile::load(path)?;
    ExperimentConfig::from_file(&file, cli.seed).map_err(|e| usage(format!("{e:#}")))
}

fn run(cli: Cli) -> Result<i32> {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Fixture => {
            commands::cmd_fixture(&cli.out)?;
        }
        Command::Prepare { expect } => {
            let config = load_config(&cli)?;
            commands::cmd_prepare(&config, &cli.out, expect.as_deref(), started)?;
        }
        Command::Pairs => {
            let config = load_config(&cli)?;
            commands::cmd_pairs(&config, &cli.out, started)?;
        }
        Command::Train {
            stage,
            dialect_checkpoint,
        } => {
            let config = load_config(&cli)?;
            commands::cmd_train(
                &config,
                &cli.out,
                stage,
                dialect_checkpoint.as_deref(),
                started,
            )?;
        }
        Command::Eval {
            checkpoint,
            dialect_checkpoint,
            rows,
            skyline,
            in_dialect,
        } => {
            let config = load_config(&cli)?;
            let flags = commands::EvalFlags {
                checkpoint: checkpoint.as_deref(),
                dialect_checkpoint: dialect_checkpoint.as_deref(),
                rows,
                skyline: skyline.as_deref(),
                in_dialect,
            };
            commands::cmd_eval(&config, &cli.out, &flags, started)?;
        }
        Command::Report {
            rows,
            skyline,
            in_dialect,
            published,
        } => {
            commands::cmd_report(&cli.out, rows, skyline, in_dialect, published.as_deref())?;
        }
        Command::Ablate { grid } => {
            let failures = commands::cmd_ablate(grid, &cli.out, cli.jobs, cli.seed, started)?;
            if failures > 0 {
                eprintln!("{failures} ablation cells failed");
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(error) => {
            eprintln!("error: {error:#}");
            let code = if error.is::<UsageError>() { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}
