//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any part of the retargeting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// XML or file-format level parse failure, with source position when known.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// A URDF joint type outside the supported subset.
    #[error("unsupported joint '{0}': only revolute, continuous, fixed, and a single floating base are handled")]
    UnsupportedJoint(String),

    /// Kinematic-tree level inconsistency (multiple roots, cycles, bad parents).
    #[error("structure error: {0}")]
    Structure(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or clip dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A quantity left its mathematical domain (non-finite, non-positive scale, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or other numeric breakdowns during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Persisted-file versioning or corruption problem.
    #[error("format error: {0}")]
    Format(String),

    /// Direct optimization failed to make progress.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// Diffusion sampling produced a non-finite state.
    #[error("sampling error at step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
