use thiserror::Error;

/// Errors raised anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite; attempted jitter ladder {ladder:?}")]
    NotPositiveDefinite { ladder: Vec<f64> },

    #[error("triangular factor is singular: zero diagonal at index {index}")]
    SingularTriangular { index: usize },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid fault: {0}")]
    InvalidFault(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("type-II fit failed: {0}")]
    FitFailed(String),

    #[error("{failed} of {total} trials failed numerically (limit {limit}); failing trial indices: {indices:?}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: usize,
        indices: Vec<usize>,
    },

    #[error("config syntax error at line {line}, column {column}: {message}")]
    ConfigSyntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error at `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("data error in {location}: {message}")]
    Data { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }
}
