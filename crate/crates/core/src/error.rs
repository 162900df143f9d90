//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input is outside the operation's domain (empty sets, bad counts, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A value fails a structural or numeric validity check.
    #[error("validation error: {0}")]
    Validation(String),

    /// Numerically degenerate input (e.g. near-zero mean in a relative statistic).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Operation invoked in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// Caller violated the ask/tell or enqueue protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Request exceeds the worker pool's capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A configuration was scheduled or recorded twice on the same worker.
    #[error("exclusion violation: config {config_id:016x} already sampled on worker {worker_id}")]
    Exclusion { config_id: u64, worker_id: usize },

    /// Predicted relative error s <= -1 makes the p/(s+1) adjustment blow up.
    #[error("adjustment overflow: predicted relative error {predicted} leaves no usable divisor")]
    AdjustmentOverflow { predicted: f64 },

    /// Bad command-line or file-level input.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
