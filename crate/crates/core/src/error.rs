use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Structural corruption in a matrix image, located by byte offset when known.
    #[error("corrupt image at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("malformed tile record: {0}")]
    MalformedTile(String),

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("vertex id {id} out of range for dimension {dim}")]
    IdOutOfRange { id: u64, dim: u64 },

    #[error("duplicate weighted edge ({row}, {col})")]
    DuplicateEdge { row: u64, col: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("memory budget exceeded: need {needed} bytes, limit {limit} bytes")]
    Budget { needed: u64, limit: u64 },

    #[error("matrix is not symmetric: entry ({row}, {col}) has no matching transpose")]
    NotSymmetric { row: u64, col: u64 },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: u64, col: u64, value: f64 },

    #[error("eigensolver stagnated after {iterations} iterations (best residual {best_residual:e})")]
    Stagnation { iterations: usize, best_residual: f64 },
}

impl Error {
    pub(crate) fn corrupt(offset: u64, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(reason: impl Into<String>) -> Self {
        Error::Shape(reason.into())
    }
}
