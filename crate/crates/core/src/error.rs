use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing column `{column}` (named by schema key `{key}`)")]
    MissingColumn { key: &'static str, column: String },

    #[error("non-numeric cell in column `{column}` at line {line}: {value:?}")]
    NonNumeric {
        column: String,
        line: u64,
        value: String,
    },

    #[error("duplicate observation time {time} for subject `{subject}`")]
    DuplicateTime { subject: String, time: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Q_i(v) is not numerically positive definite at the requested parameter.
    #[error("covariance matrix of subject `{subject}` is not positive definite")]
    CholeskyFailure { subject: String },

    #[error("estimated information block {block} is singular")]
    SingularInformation { block: &'static str },

    #[error("zero variance in studentized values of `{parameter}`")]
    ZeroVariance { parameter: String },

    #[error("dataset failed validation: {0}")]
    InvalidDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
