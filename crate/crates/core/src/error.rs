use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("volume has zero variance; cannot standardize")]
    ConstantVolume,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unsupported or malformed volume file: {0}")]
    Format(String),
    #[error("missing or invalid metadata: {0}")]
    Metadata(String),
    #[error("dataset has no cases")]
    EmptyDataset,
    #[error("mask is all-foreground or all-background; signed distance undefined")]
    DegenerateMask,
    #[error("non-finite value encountered: {0}")]
    Numerics(String),
    #[error("Monte Carlo sampling with dropout rate 0 yields identical samples")]
    UselessSampling,
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(what: impl Into<String>) -> Result<T> {
    Err(Error::Shape(what.into()))
}
