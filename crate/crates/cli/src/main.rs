//! `gcms`: rasterize, render, train, predict, ensemble and evaluate GCMS
//! samples from the command line.
//!
//! Exit codes: 0 on success, 1 for bad input (missing files, malformed
//! data, invalid flags), 2 for internal failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcms_core::raster::{LogMode, NormMode};
use gcms_core::GcmsError;

#[derive(Debug, Parser)]
#[command(
    name = "gcms",
    version,
    about = "GCMS rasterization and classification toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config file (`key = value`, needs `version = 1`).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset root holding labels.csv, metadata.csv and the samples.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub time_slots: Option<usize>,
    #[arg(long, global = true, value_name = "MODE")]
    pub norm: Option<NormMode>,
    #[arg(long, global = true, value_name = "MODE")]
    pub log: Option<LogMode>,
    /// Predict with test-time augmentation over the time sizes 128..=256 step 32.
    #[arg(long, global = true)]
    pub tta: bool,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one GCR1 raster per sample.
    Rasterize {
        /// Sample ids from the manifest; every entry when omitted.
        ids: Vec<String>,
    },
    /// Render a GCR1 raster as an 8-bit RGB PNG.
    Render {
        raster: PathBuf,
        /// Put m/z 0 on the top row instead of m/z 255.
        #[arg(long)]
        mz_zero_top: bool,
    },
    /// Generate a synthetic labeled dataset.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Train the time-averaged linear head; writes params.gcmp and loss_trace.csv.
    Train {
        /// Override the epoch count from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict every manifest entry (or the given ids) with a trained model.
    Predict {
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        ids: Vec<String>,
    },
    /// Combine prediction files in logit space.
    Ensemble {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
    },
    /// Score a predictions file against the manifest labels.
    Evaluate { predictions: PathBuf },
    /// K-fold out-of-fold predictions over the labeled samples.
    Oof {
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Internal(String),
}

impl From<GcmsError> for Failure {
    fn from(e: GcmsError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
