//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument was out of range or non-finite.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix failed to decompose; carries the offending residual norm.
    #[error("decomposition failed: residual {residual:.3e} exceeds tolerance {tolerance:.1e}")]
    Decomposition { residual: f64, tolerance: f64 },

    /// Shapes or block grids do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An objective or activation went non-finite; carries diagnostic state.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Stage preconditions not met (e.g. degenerate Σ during calibration).
    #[error("stage precondition failed: {0}")]
    Precondition(String),

    #[error("dataset format error at byte {offset}: {message}")]
    DatasetFormat { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl Error {
    /// Process exit code for the CLI: config errors exit 2, numerical aborts 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
