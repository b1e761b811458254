//! `stoloc`: experiment drivers for stochastic localization.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 output I/O failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{CommonArgs, InitKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    /// Classify an error raised while building inputs: anything but a
    /// blowup is the configuration's fault.
    pub fn from_config(e: stoloc::Error) -> Self {
        match e {
            stoloc::Error::NumericalBlowup { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }

    /// Classify an error raised by a simulation.
    pub fn from_run(e: stoloc::Error) -> Self {
        match e {
            stoloc::Error::InvalidInput(_) | stoloc::Error::Unsupported(_) | stoloc::Error::NotPsd { .. } => {
                CliError::Config(e.to_string())
            }
            stoloc::Error::Io(_) | stoloc::Error::Csv(_) | stoloc::Error::Json(_) => {
                CliError::Output(e.to_string())
            }
            stoloc::Error::NumericalBlowup { .. } => CliError::Numerical(e.to_string()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stoloc", version, about = "Stochastic localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Localization rate curves E[tr Σ_t] for several α.
    Localize(CommonArgs),
    /// W2 bounds from joint SL couplings against exact and independence costs.
    Couple(CommonArgs),
    /// SL distance (plain or time-weighted) between two measures.
    Distance(CommonArgs),
    /// KL divergence to N(0, I) through the SL representation.
    Klcheck(CommonArgs),
    /// Fit a Legendre pushforward model by minimizing the SL loss.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Initialization: informed (PCA) or random.
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum InitArg {
    Informed,
    Random,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Localize(a) => commands::localize(a),
        Command::Couple(a) => commands::couple(a),
        Command::Distance(a) => commands::distance(a),
        Command::Klcheck(a) => commands::klcheck(a),
        Command::Fit { common, init } => commands::fit(
            common,
            init.map(|i| match i {
                InitArg::Informed => InitKind::Informed,
                InitArg::Random => InitKind::Random,
            }),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stoloc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
