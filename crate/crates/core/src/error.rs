use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the data, model and inference layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate key ({age}, {year}, {area}) in {path}")]
    DuplicateKey {
        path: PathBuf,
        age: i64,
        year: i64,
        area: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid adjacency: {0}")]
    Adjacency(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("hyperparameter optimisation did not converge after {evaluations} evaluations (best value {best_value})")]
    HyperNotConverged {
        evaluations: usize,
        best: Vec<f64>,
        best_value: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
