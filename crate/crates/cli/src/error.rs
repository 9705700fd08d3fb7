use std::fmt::Display;
use std::path::Path;

use serde::Serialize;
use stratopt::error::StageError;
use stratopt::{Error as PipelineError, ErrorKind, Stage};
use thiserror::Error;

/// Failures in the driver itself, before a stage is attached.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn file(path: &Path, err: impl Display) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<CliError> for StageError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Config(m) => StageError::Config(m),
            CliError::Data(m) => StageError::Data(m),
        }
    }
}

/// The JSON document written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl ErrorReport {
    pub fn from_error(e: &PipelineError) -> Self {
        ErrorReport {
            stage: e.stage,
            kind: e.kind(),
            message: e.source.to_string(),
        }
    }
}
