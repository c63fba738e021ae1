use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: expected {expected}, found {found}")]
    ShapeMismatch {
        node: String,
        expected: String,
        found: String,
    },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite entries in Jacobian rows {rows:?}")]
    NonFiniteRows { rows: Vec<usize> },

    #[error("Jacobian of {rows}x{cols} needs {required} bytes, above the {cap} byte cap")]
    MemoryBudget {
        rows: usize,
        cols: usize,
        required: usize,
        cap: usize,
    },

    #[error("singular kernel: smallest eigenvalue {smallest:e} (largest {largest:e})")]
    SingularKernel { smallest: f64, largest: f64 },

    #[error("eigensolver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: usize, detail: String },

    #[error("malformed {kind} file {}: {detail}", path.display())]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("truncated {kind} file {}: expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        kind: &'static str,
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors that mean the optimisation itself blew up, as opposed
    /// to a configuration or I/O problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteRows { .. }
                | Error::SingularKernel { .. }
                | Error::NoConvergence { .. }
                | Error::NumericalAbort { .. }
        )
    }
}
