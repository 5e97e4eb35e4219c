use thiserror::Error;

/// Crate-wide error type. Variants map to the failure classes surfaced by the
/// public API: shape/dimension mismatches, bad configuration, table lookups,
/// invalid pipeline state, and numeric blow-ups.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
