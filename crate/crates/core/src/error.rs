use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LdgdError>;

#[derive(Debug, Error)]
pub enum LdgdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Factorization still failed after the jitter ladder was exhausted.
    #[error("matrix not positive definite at leading minor {minor} (jitter tried up to {max_jitter:e})")]
    NotPositiveDefinite { minor: usize, max_jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value in parameter block `{block}`")]
    NonFiniteParameter { block: String },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unparseable value {value:?} at row {row}, column `{column}`")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing value at rows {rows:?}")]
    MissingValues { rows: Vec<usize> },

    #[error("unknown label column `{0}`")]
    UnknownColumn(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<LdgdError>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LdgdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LdgdError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from floating-point breakdown rather than
    /// bad input.
    pub fn is_numerical(&self) -> bool {
        if let LdgdError::AtIteration { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            LdgdError::NotPositiveDefinite { .. }
                | LdgdError::Numerical(_)
                | LdgdError::NonFiniteParameter { .. }
                | LdgdError::NonFiniteObjective { .. }
        )
    }

    /// Wraps the error with the training iteration it occurred at.
    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            LdgdError::NonFiniteObjective { .. } | LdgdError::AtIteration { .. } => self,
            other => LdgdError::AtIteration {
                iteration,
                source: Box::new(other),
            },
        }
    }

    pub fn is_io(&self) -> bool {
        if let LdgdError::AtIteration { source, .. } = self {
            return source.is_io();
        }
        matches!(self, LdgdError::Io { .. } | LdgdError::MissingFile(_))
    }
}
