//! `msgw`: train, evaluate and inspect graph-based wind speed forecasters.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "msgw", version, about = "Graph-based multi-station wind speed forecasting")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one dotted config key, e.g. `--set model.horizon=12`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model for the configured horizon.
    Train,
    /// Test-split MAE/MSE of a checkpoint next to the persistence baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast from the most recent window of station CSVs in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Write a checkpoint's learned adjacency as labeled CSV.
    ExportAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<output_dir>/adjacency.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic station CSVs with a planted chain graph.
    GenSynthetic {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        hours: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        /// Diagonal weight of the planted adjacency.
        #[arg(long, default_value_t = 0.3)]
        self_weight: f64,
    },
    /// Per-target timestamp/actual/predicted columns for the test split,
    /// plus the adjacency CSV.
    DumpPlotData {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
