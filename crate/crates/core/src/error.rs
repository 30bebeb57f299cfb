use std::io;

use thiserror::Error;

use crate::dsl::ParseError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite output from {part} policy")]
    NonFinite { part: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("type error: {0}")]
    Type(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("parameter vector has length {got}, program expects {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
