use thiserror::Error;

/// Errors raised by the co-clustering library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input file")]
    EmptyFile,

    #[error("ragged rows: line {line} has {found} fields, expected {expected}")]
    RaggedRows { line: usize, expected: usize, found: usize },

    #[error("non-numeric cell at line {line}, field {field}: {value:?}")]
    NonNumeric { line: usize, field: usize, value: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("mutual information of the data is {0:e}; cross-loss disabled")]
    DegenerateMutualInformation(f64),

    #[error("EM failed: {0}")]
    EmFailure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::NonFinite(_)
            | Error::DegenerateMutualInformation(_)
            | Error::EmFailure(_)
            | Error::InvalidMixture(_) => ErrorCategory::Numerical,
            Error::DimensionMismatch { .. }
            | Error::EmptyFile
            | Error::RaggedRows { .. }
            | Error::NonNumeric { .. }
            | Error::InvalidData(_)
            | Error::Checkpoint(_)
            | Error::Csv(_)
            | Error::Serde(_)
            | Error::Io(_) => ErrorCategory::Data,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
