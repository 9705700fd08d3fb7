//! Pipeline-level errors: which stage failed, and what kind of failure it
//! was (bad configuration, bad data, or a numerically degenerate problem).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CohortError;
use crate::counterfactual::CounterfactualError;
use crate::evaluate::EvaluateError;
use crate::matcher::MatchError;
use crate::policy_tree::PolicyError;
use crate::risk_forest::ForestError;
use crate::strata::StrataError;
use crate::synthgen::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Simulate,
    Load,
    Normalize,
    Risk,
    Stratify,
    Match,
    Counterfactual,
    Policy,
    Validate,
    Tune,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Load => "load",
            Stage::Normalize => "normalize",
            Stage::Risk => "risk",
            Stage::Stratify => "stratify",
            Stage::Match => "match",
            Stage::Counterfactual => "counterfactual",
            Stage::Policy => "policy",
            Stage::Validate => "validate",
            Stage::Tune => "tune",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    /// Process exit code for this kind of failure.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Strata(#[from] StrataError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StageError {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            StageError::Config(_) | StageError::Synth(_) => Config,
            StageError::Data(_) | StageError::Io(_) => Data,
            StageError::Cohort(e) => match e {
                CohortError::InvalidFraction(_) => Config,
                CohortError::DegenerateCohort(_) => Numeric,
                _ => Data,
            },
            StageError::Forest(e) => match e {
                ForestError::InvalidConfig(_) => Config,
                ForestError::DimensionMismatch { .. } => Data,
                _ => Numeric,
            },
            StageError::Strata(e) => match e {
                StrataError::InvalidEdges(_) | StrataError::InvalidThreshold(_) => Config,
                StrataError::LengthMismatch { .. } | StrataError::OutOfRange(_) => Data,
                _ => Numeric,
            },
            StageError::Match(e) => match e {
                MatchError::LengthMismatch { .. } => Data,
                _ => Numeric,
            },
            StageError::Counterfactual(e) => match e {
                CounterfactualError::InvalidRho(_) | CounterfactualError::InvalidEpsilon(_) => Config,
                _ => Numeric,
            },
            StageError::Policy(e) => match e {
                PolicyError::InvalidConfig(_) => Config,
                PolicyError::DimensionMismatch { .. } => Data,
                _ => Numeric,
            },
            StageError::Evaluate(e) => match e {
                EvaluateError::EmptyGrid | EvaluateError::InvalidRho(_) | EvaluateError::InvalidFloor(_) => Config,
                EvaluateError::TreatedRecordPresent(_) | EvaluateError::EmptyCohort => Data,
                EvaluateError::Policy(p) => StageError::Policy(p.clone()).kind(),
                EvaluateError::Counterfactual(_) => Numeric,
            },
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct Error {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

impl Error {
    pub fn new(stage: Stage, source: impl Into<StageError>) -> Self {
        Error {
            stage,
            source: source.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        self.source.kind()
    }
}

/// Attaches a stage to any error convertible into [`StageError`].
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, Error>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, Error> {
        self.map_err(|e| Error::new(stage, e))
    }
}
