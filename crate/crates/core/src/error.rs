//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    /// Two RDP curves were combined although they live on different order
    /// grids.
    #[error("rdp curves use different order grids")]
    GridMismatch,

    #[error("rdp curve has no orders")]
    EmptyCurve,

    #[error("vote for class {class} out of range (num_classes = {num_classes}, teacher {teacher})")]
    InvalidVote {
        teacher: usize,
        class: u32,
        num_classes: u32,
    },

    #[error("plan infeasible: {0}")]
    PlanInfeasible(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category; the CLI maps these to exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::GridMismatch => "grid-mismatch",
            Error::EmptyCurve => "empty-curve",
            Error::InvalidVote { .. } => "invalid-vote",
            Error::PlanInfeasible(_) => "plan-infeasible",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn invalid_param(name: &'static str, message: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        message: message.into(),
    }
}
