use std::io;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; carries the 1-based line number of the offending line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Structurally valid input holding unusable values.
    #[error("data error: {0}")]
    Data(String),
    /// An operation that requires points or voxels received none.
    #[error("empty input")]
    EmptyInput,
    /// An attention window with no real voxels.
    #[error("empty attention window")]
    EmptyWindow,
    /// A lookup-table set used through the wrong variant entry point.
    #[error("table mode mismatch: expected {expected}, got {actual}")]
    Mode { expected: String, actual: String },
    /// Domain index outside the registered range.
    #[error("unknown domain {domain}: valid domains are 0..{count}")]
    Domain { domain: usize, count: usize },
    /// Dimensions that do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// Requested signal not present in a cloud's mask.
    #[error("signal mask error: {0}")]
    SignalMask(String),
    /// Mask argument violating a subset/superset precondition.
    #[error("mask error: {0}")]
    Mask(String),
    /// Signal subset missing the mandatory position channel.
    #[error("subset error: {0}")]
    Subset(String),
    /// Scalar argument outside its documented range.
    #[error("range error: {0}")]
    Range(String),
    /// Inconsistent model configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite value produced where finite arithmetic is required.
    #[error("numerics error: {0}")]
    Numerics(String),
    /// Invariant violation that signals a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
