use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty label matrix")]
    EmptyMatrix,

    #[error("invalid fraction {0}: must lie in {1}")]
    InvalidFraction(f64, &'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {0} has no observed labels and unlabeled rows are not allowed")]
    UnlabeledRow(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unexpected end of file")]
    UnexpectedEof,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown clip id {0:?}")]
    UnknownClipId(String),

    #[error("duplicate clip id {0:?}")]
    DuplicateClipId(String),

    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: u64, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("no observed labels to evaluate")]
    NoObservedLabels,

    #[error("no scoreable class: every class lacks a positive or a negative")]
    NoScoreableClass,

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
