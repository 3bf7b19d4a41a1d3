//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A run configuration field is invalid or two fields conflict.
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A value does not fit the fixed-width cache encoding.
    #[error("cache capacity exceeded: {0}")]
    Capacity(String),

    /// Stored cache bytes violate the format's invariants.
    #[error("corrupt cache data: {0}")]
    Corruption(String),

    /// An internal contract was violated; indicates a bug, not bad input.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
