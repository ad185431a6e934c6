//! `lska`: verification suite, cost sweeps, microbenchmarks, ERF maps and
//! the latent probe.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config
//! error, 3 I/O error. Failed commands leave no output files behind.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use lska_core::{Error, ModelConfig};

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Name of the first failing property.
    Verify(String),
    Usage(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Verify(name) => write!(f, "verification failed: {name}"),
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<ModelConfig>, CliError> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| output::io_err(path, e))?;
    ModelConfig::from_json(&text)
        .map(Some)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli)?;
    let config = config.as_ref();
    match cli.command {
        Command::Verify(a) => commands::verify(a, config),
        Command::Cost(a) => commands::cost(a, config),
        Command::Sweep(a) => commands::sweep(a, config),
        Command::Erf(a) => commands::erf(a, config),
        Command::Probe(a) => commands::probe(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
