//! Command-line front end: synthetic data, training, evaluation, numerical
//! self-checks, kernel inspection and multi-seed sweeps.

mod commands;
mod config;
mod verify;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::TrainOpts;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files (exit 2).
    Usage(String),
    /// Failure while running a valid request (exit 1).
    Runtime(String),
    /// A numerical self-check did not hold (exit 3).
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<ckgnn::Error> for CliError {
    fn from(e: ckgnn::Error) -> Self {
        match e {
            ckgnn::Error::Parse { .. }
            | ckgnn::Error::InvalidArgument(_)
            | ckgnn::Error::Split(_)
            | ckgnn::Error::TooFew { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ckgnn", version, about = "Graph neural networks with a learned composite kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a stochastic-block-model dataset.
    GenSynthetic(GenArgs),
    /// Train one model, streaming per-epoch JSON lines.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        /// Write a checkpoint of the best-epoch parameters.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Report accuracies of a saved checkpoint.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the numerical self-checks; exits 3 if any fails.
    Verify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the learned composite kernel next to the normalised adjacency.
    InspectKernel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over several seeds in parallel and summarise test accuracy.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seeds: u64,
        /// Worker threads (defaults to available parallelism).
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic(args) => commands::gen_synthetic(&args),
        Command::Train { data, opts, save } => commands::train(&data, &opts, save.as_deref()),
        Command::Eval { params, data } => commands::eval(&params, &data),
        Command::Verify { data, seed } => commands::verify(&data, seed),
        Command::InspectKernel { data, params, out } => commands::inspect_kernel(&data, &params, &out),
        Command::Sweep {
            data,
            seeds,
            threads,
            opts,
        } => commands::sweep(&data, seeds, threads, &opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
