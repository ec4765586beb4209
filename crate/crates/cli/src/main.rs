//! `fsvi`: train, evaluate and query function-space variational BNNs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{DatagenArgs, EvaluateArgs, PredictArgs, TrainArgs};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "fsvi", version, about = "Function-space variational inference for Bayesian MLPs")]
struct Cli {
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true, env = "FSVI_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON run config; writes checkpoint, history, metrics and entropy files.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics, per-point entropies and the selective-prediction curve for a labelled CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Out-of-distribution inputs; adds AUROC and their entropies.
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Predictive draws.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Comma-separated referral rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Per-row predictive summaries for an input CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Writes a synthetic dataset (two_moons or gap_sine) as CSV.
    Datagen {
        #[arg(long)]
        generator: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let command = cli.command;
    let go = move || match command {
        Command::Train { config, out, seed } => commands::train(&TrainArgs { config, out, seed }),
        Command::Evaluate { checkpoint, data, ood, out, seed, samples, rates } => {
            commands::evaluate_cmd(&EvaluateArgs { checkpoint, data, ood, out, seed, samples, rates })
        }
        Command::Predict { checkpoint, data, out, seed, samples } => {
            commands::predict(&PredictArgs { checkpoint, data, out, seed, samples })
        }
        Command::Datagen { generator, n, noise, seed, out } => {
            commands::datagen(&DatagenArgs { generator, n, noise, seed, out })
        }
    };
    match cli.threads {
        Some(0) => Err(CliError::user("--threads must be at least 1")),
        Some(t) => fsvi::par::with_threads(t, go),
        None => go(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::user(first).to_line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
