//! Command failures and their exit codes.

use std::path::Path;

use ctf_grpo::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, data, scenario, checkpoint or a missing file.
    #[error("{0}")]
    Invalid(String),
    /// Failure while running: non-finite numbers or I/O on outputs.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::Invalid(message.into())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(_)
            | Error::Checkpoint(_)
            | Error::Scenario(_)
            | Error::Walkthrough(_)
            | Error::Shape(_)
            | Error::ContextOverflow { .. }
            | Error::Replay { .. }
            | Error::Json(_) => CliError::Invalid(message),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Invalid(message),
            _ => CliError::Runtime(message),
        }
    }
}

impl From<ctf_grpo::walkthrough::WalkthroughError> for CliError {
    fn from(e: ctf_grpo::walkthrough::WalkthroughError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ctf_grpo::sim::ScenarioError> for CliError {
    fn from(e: ctf_grpo::sim::ScenarioError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Wraps an output-side I/O failure with the path involved.
pub fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads an input file, reporting a missing or unreadable file as invalid input.
pub fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}
