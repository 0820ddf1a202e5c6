use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive definite (jitter tried up to {attempted_jitter:e})")]
    NotPositiveDefinite { attempted_jitter: f64 },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("noise variance must be finite and positive, got {0}")]
    InvalidNoiseVariance(f64),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("diagonal entry {index} is not positive ({value:e})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("strategy {0} requires curvature that was not provided")]
    MissingCurvature(&'static str),

    #[error("Jacobian columns do not match the posterior index map")]
    IndexMapMismatch,

    #[error("operation expects a {expected} task")]
    TaskMismatch { expected: &'static str },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    DivergedTraining { epoch: usize },

    #[error("too few points ({have}) for the requested split")]
    TooFewPoints { have: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
