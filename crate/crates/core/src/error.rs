//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map to the distinct failure contracts:
/// shape/dimension violations, bad indices, invalid configuration, broken
/// call contracts, malformed on-disk data, and non-finite numerics.
#[derive(Debug, Error)]
pub enum MaeError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("row index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {format} data: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaeError>;
