//! Crate-wide error type.

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration value violates a structural requirement.
    #[error("config error: {0}")]
    Config(String),
    /// Caller-supplied data is invalid (unknown token, empty reference, ...).
    #[error("input error: {0}")]
    Input(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite values produced by `{0}`")]
    NonFinite(&'static str),
    /// An API contract was violated (non-scalar loss, negative time, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// No monotonic surjective alignment exists.
    #[error("infeasible alignment: {0}")]
    Infeasible(String),
    /// A learnable embedding was asked for positions beyond its trained extent.
    #[error("extent error: {0}")]
    Extent(String),
    /// Training diverged or another numeric failure occurred.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A serialized file is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
