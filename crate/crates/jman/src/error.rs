use thiserror::Error;

/// Crate-wide error type.
///
/// The variants mirror how the CLI maps failures to exit codes: everything
/// except [`Error::Numeric`] is a usage or data problem (exit 2); numeric
/// failures such as a NaN training loss exit with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension disagreement, naming the offending shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter outside its documented domain (e.g. dropout p >= 1).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or inconsistent input data (datasets, feature files, tokens).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse (e.g. backward on a non-scalar, mismatched corpus sizes).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values where the computation requires finite ones.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
