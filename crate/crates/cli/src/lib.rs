//! Command-line front end: parameter reports, gradient checks, training,
//! low-resource sweeps and run-directory reports.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use petkit::{Convention, PetError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Pet(#[from] PetError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pet(e.into())
    }
}

impl CliError {
    /// 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Pet(PetError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    WeightsOnly,
    All,
    Both,
}

impl ConventionArg {
    pub fn conventions(self) -> Vec<Convention> {
        match self {
            ConventionArg::WeightsOnly => vec![Convention::WeightsOnly],
            ConventionArg::All => vec![Convention::All],
            ConventionArg::Both => vec![Convention::WeightsOnly, Convention::All],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "petkit", version, about = "Adapter tuning experiments on a HuBERT-shaped encoder")]
#[command(after_long_help = config::CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct OutArgs {
    /// Output root; a fresh timestamped directory is created inside it.
    /// Defaults to the config's `out`, then to ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count trainable parameters of the configured strategy.
    Params {
        #[arg(long, short = 'c')]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        convention: ConventionArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck {
        #[arg(long, short = 'c')]
        config: PathBuf,
        #[arg(long, default_value_t = petkit::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Std of the noise added to trainable tensors before checking.
        #[arg(long, default_value_t = 0.1)]
        perturb: f64,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Learning-rate grid search for one strategy.
    Train {
        #[arg(long, short = 'c')]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run on one thread.
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Grid search per (strategy, training fraction, seed).
    Sweep {
        #[arg(long, short = 'c')]
        config: PathBuf,
        /// Replaces `sweep.seeds` with N, N+1, N+2.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Consolidate every records.jsonl below RUN_DIR.
    Report {
        run_dir: PathBuf,
        /// Where to write the tables; defaults to RUN_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
