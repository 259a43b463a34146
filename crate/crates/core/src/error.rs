use thiserror::Error;

/// Error type shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; carries the location when the parser knows it.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Input violates a documented contract (bad config, inconsistent ids, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite value where the computation requires finite arithmetic.
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
