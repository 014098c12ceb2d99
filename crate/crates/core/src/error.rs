use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no kernel mass at t = {t} (bandwidth {h})")]
    OutOfSupport { t: f64, h: f64 },

    #[error("bandwidth selection failed: {0}")]
    Bandwidth(String),

    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("singular step matrix: {0}")]
    Singular(String),

    #[error("iterate hit the chart boundary {count} times")]
    Boundary { count: usize },

    #[error("tuning failed: every grid point failed ({failed} of {total})")]
    Tuning { failed: usize, total: usize },

    #[error("study failed: {failed} of {total} replications failed")]
    Study { failed: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
