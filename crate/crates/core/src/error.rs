//! Crate-wide error type.
//!
//! One enum keeps the CLI's exit-code mapping simple: every variant
//! classifies as usage, data, or numeric via [`Error::kind`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("referential integrity violation: {0}")]
    Integrity(String),

    #[error("no segment has at least two judged systems; dataset unusable for pairwise supervision")]
    NoUsablePairs,

    #[error("split leaves the {side} side empty")]
    EmptySplit { side: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unusable input: {0}")]
    UnusableInput(String),

    #[error("segment {segment} has no {what}")]
    MissingPerSegment { segment: String, what: String },

    #[error("systems {a} and {b} share no covered segments")]
    EmptyIntersection { a: String, b: String },

    #[error("missing score for ordered pair ({a}, {b})")]
    MissingOrderedPair { a: String, b: String },

    #[error("degenerate score table: mean absolute system score is zero")]
    DegenerateScores,

    #[error("score tables do not cover the same rows: {0}")]
    TableMismatch(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Numeric { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
