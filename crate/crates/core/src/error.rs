//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Acquisition scheme violates an invariant or cannot be parsed.
    #[error("invalid scheme: {0}")]
    Scheme(String),

    /// Input data (voxel tables, masks, raw vectors) is inconsistent.
    #[error("invalid input: {0}")]
    Input(String),

    /// Matrix/volume shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric precondition was violated (e.g. gradient factor at b=0).
    #[error("numeric domain: {0}")]
    Domain(String),

    /// A statistical test has no information to work with.
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Container file is malformed.
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
