use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("sequence {sequence} / subject {subject} out of range")]
    OutOfRange { sequence: usize, subject: usize },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("missing value for covariate `{0}`")]
    MissingCovariate(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("fixed-effects normal equations are singular; dependent columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
