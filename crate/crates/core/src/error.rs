use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("{op}: non-finite value at token {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite loss at step {0}")]
    NanLoss(usize),

    #[error("chunked and sequential scans disagree by {max_diff:e} (limit {limit:e})")]
    Equivalence { max_diff: f64, limit: f64 },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    /// Process exit code for this error: 1 usage, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Param(_) | Error::Config(_) | Error::NotScalar(_) => 1,
            Error::NonFinite { .. } | Error::NanLoss(_) | Error::Equivalence { .. } => 2,
            Error::Format { .. } | Error::Io(_) => 3,
        }
    }
}
