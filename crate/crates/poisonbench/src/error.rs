//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("patch out of bounds: patch {side}x{side} at ({y},{x}) on {h}x{w} image")]
    PatchOutOfBounds {
        side: usize,
        y: usize,
        x: usize,
        h: usize,
        w: usize,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite gradient encountered in {0}")]
    NonFiniteGradient(&'static str),

    #[error("no samples for classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("architecture mismatch: checkpoint has {found}, expected {expected}")]
    ArchMismatch { expected: String, found: String },

    #[error("unknown sample id {0}; oracle has no label for it")]
    UnknownSampleId(u64),

    #[error("need {needed} samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
