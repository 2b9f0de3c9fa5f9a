use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidToken { id: u32, vocab: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("no embedding for candidate {0}")]
    MissingCandidate(u64),
    #[error("index {index} out of range for length {len}")]
    InvalidIndex { index: usize, len: usize },
    #[error("negative pool has {available} entries, need {needed}")]
    PoolTooSmall { available: usize, needed: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("cannot encode query: {0}")]
    Encode(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed or inconsistent data rather than
    /// programming or configuration mistakes.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_data_error(),
            Error::InvalidConfig(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
