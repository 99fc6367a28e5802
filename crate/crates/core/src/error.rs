use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// Cholesky factorisation hit a non-positive or negligible pivot.
    #[error("singular or non-SPD system: pivot {pivot} failed ({value:e})")]
    SingularSystem { pivot: usize, value: f64 },

    #[error("result of {entries} entries exceeds capacity cap {cap}")]
    CapacityExceeded { entries: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A covariance left the positive semidefinite cone by more than rounding.
    #[error("covariance factor lost positive semidefiniteness: min eigenvalue {min_eig:e} (trace {trace:e})")]
    NotPsd { min_eig: f64, trace: f64 },

    #[error("full covariance is not of the form V (x) I_m: relative residual {residual:e}")]
    StructureBroken { residual: f64 },

    #[error("parse error at line {line}{}: {msg}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        line: usize,
        col: Option<usize>,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
