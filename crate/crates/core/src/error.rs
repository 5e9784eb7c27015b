use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// Variants are grouped by class (see [`Error::class`]) so front ends can map
/// them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("index {index} out of range 0..{bound} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("position {position} outside rotary table of extent {max_position}")]
    Range { position: usize, max_position: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("non-finite loss at step {step} (stage {stage_index}, seq_len {seq_len})")]
    NonFiniteLoss {
        step: u64,
        stage_index: usize,
        seq_len: usize,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

/// Coarse error classes, one per process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
    Format,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Schedule(_) | Error::Contract(_) | Error::Dimension { .. } => {
                ErrorClass::Config
            }
            Error::Data(_) | Error::Capacity(_) | Error::Index { .. } | Error::Range { .. } => {
                ErrorClass::Data
            }
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            Error::Format(_) | Error::Integrity(_) | Error::Serde(_) => ErrorClass::Format,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
