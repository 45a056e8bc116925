use std::path::PathBuf;

use ldgd::LdgdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Model(#[from] LdgdError),

    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config file {}: {source}", path.display())]
    Config {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("gradient check failed for blocks: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 0 success, 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Config { .. } => 1,
            CliError::Read { .. } | CliError::Write { .. } => 3,
            CliError::GradCheck(_) => 2,
            CliError::Model(e) if e.is_io() => 3,
            CliError::Model(e) if e.is_numerical() => 2,
            CliError::Model(_) => 1,
        }
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Model(LdgdError::Csv(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Model(LdgdError::Json(e))
    }
}
