use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A physical or algorithmic parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A state, torque or intermediate quantity became NaN/inf.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Two containers that must agree in length do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An iterative numerical routine failed to converge.
    #[error("{0} did not converge after {1} iterations")]
    NoConvergence(String, usize),

    /// A covariance factorization failed even after jitter was added.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {0}: loss is not finite")]
    TrainingDiverged(usize),

    /// An episode is too short for the requested operation.
    #[error("episode too short: {0}")]
    EpisodeTooShort(String),

    /// Malformed serialized data (CSV, checkpoint, manifest).
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint format violation (bad magic, version or layout).
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
