mod config;
mod gen;
mod msda;
mod output;
mod report;
mod stream;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Online Gaussian mixtures and streaming multi-source domain adaptation.
#[derive(Debug, Parser)]
#[command(name = "wgmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    #[command(subcommand)]
    Gen(gen::GenCommand),
    /// Fit a mixture to a CSV file one batch at a time.
    FitStream(stream::FitStreamArgs),
    /// Fit a mixture to a whole CSV file with EM and BIC selection.
    FitOffline(stream::FitOfflineArgs),
    /// Streaming multi-source adaptation with k-fold evaluation on the target.
    Msda(msda::MsdaArgs),
    /// Score a model on data, or compare two models.
    Eval(report::EvalArgs),
    /// Summarize a model, checkpoint or dictionary file.
    Inspect {
        file: PathBuf,
    },
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<wgmm::Error> for CliError {
    fn from(e: wgmm::Error) -> Self {
        match e {
            wgmm::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            wgmm::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(cmd) => gen::run(cmd),
        Command::FitStream(args) => stream::run_fit_stream(args),
        Command::FitOffline(args) => stream::run_fit_offline(args),
        Command::Msda(args) => msda::run(args),
        Command::Eval(args) => report::run_eval(args),
        Command::Inspect { file } => report::run_inspect(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
