use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("point {point:?} lies outside the domain of space `{space}`: {reason}")]
    OutOfDomain {
        space: String,
        point: Vec<f64>,
        reason: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("singular matrix in {context}: {detail}")]
    Singular { context: String, detail: String },

    #[error("rank deficiency in {context}: rank {rank} < {required}")]
    RankDeficient {
        context: String,
        rank: usize,
        required: usize,
    },

    #[error("precondition failed for {operation}: {reason}")]
    Precondition { operation: String, reason: String },

    #[error("integration step underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error(
        "Newton inversion did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("invalid definition: {0}")]
    Definition(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: String, name: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn precondition(operation: &str, reason: impl Into<String>) -> Self {
        Error::Precondition {
            operation: operation.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dimension(context: &str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.to_string(),
            expected,
            actual,
        }
    }

    pub(crate) fn definition(msg: impl Into<String>) -> Self {
        Error::Definition(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
