//! Error types shared by all engine layers.

use thiserror::Error;

/// Result alias used throughout the engine.
pub type Result<T> = std::result::Result<T, GdiError>;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum GdiError {
    #[error("access out of bounds: offset {offset} + len {len} exceeds window size {size}")]
    OutOfBounds { offset: usize, len: usize, size: usize },

    #[error("atomic access requires 8-byte alignment, got offset {0}")]
    Misaligned(usize),

    #[error("collective call timed out after {0} ms (mismatched collective sequence?)")]
    CollectiveTimeout(u64),

    #[error("collective argument mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("duplicate: {0}")]
    Duplicate(String),

    /// A lock could not be acquired because another transaction holds it.
    #[error("lock busy")]
    Busy,

    /// A reference resolved to a block whose incarnation changed (the vertex
    /// was deleted, and possibly the block reused, since the reference was
    /// obtained).
    #[error("stale reference: incarnation mismatch")]
    Stale,

    #[error("operation not permitted in a read transaction")]
    ReadOnly,

    #[error("transaction is no longer open ({0})")]
    TxnClosed(&'static str),

    /// The transaction hit a transaction-critical error earlier; it is
    /// guaranteed to abort.
    #[error("transaction failed: {0}")]
    TxnFailed(String),

    #[error("datatype mismatch: {0}")]
    DatatypeMismatch(String),

    #[error("entity violation: {0}")]
    EntityViolation(String),

    #[error("size violation: {0}")]
    SizeViolation(String),

    #[error("constraint or index is stale")]
    StaleConstraint,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(String),
}

impl GdiError {
    /// Transaction-critical errors force the surrounding transaction to
    /// abort; commit requests after one of these yield an abort result.
    pub fn is_transaction_critical(&self) -> bool {
        matches!(
            self,
            GdiError::Busy
                | GdiError::Stale
                | GdiError::Duplicate(_)
                | GdiError::ResourceExhausted(_)
                | GdiError::TxnFailed(_)
        )
    }
}

impl From<std::io::Error> for GdiError {
    fn from(e: std::io::Error) -> Self {
        GdiError::Io(e.to_string())
    }
}
