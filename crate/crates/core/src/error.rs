//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or otherwise unusable parameter values.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Covariance is singular or not invertible.
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    /// Tensor/map dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Optimization produced a non-finite loss.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// Dataset directory or manifest is malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Checkpoint load failures are kept distinct so callers can tell a stale
/// file from a corrupt one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch in section {section}")]
    ChecksumMismatch { section: String },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("malformed section {section}: {reason}")]
    Malformed { section: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
