use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TedError {
    #[error("input shape mismatch in {context}: expected {expected}, got {got}")]
    InputShape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("episode already finished; call reset before stepping")]
    EpisodeFinished,

    #[error("no episode in progress; call reset first")]
    NoEpisode,

    #[error("action index {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("replay buffer lacks episode diversity: {0}")]
    InsufficientDiversity(String),

    #[error("episode {episode} has {resident} resident transitions, at least 3 are required")]
    InsufficientEpisodeLength { episode: u64, resident: usize },

    #[error("non-finite value at tape node {node} ({op})")]
    NumericalFailure { node: usize, op: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate train split: class {class} has no samples")]
    DegenerateSplit { class: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TedError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        TedError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TedError::InputShape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            TedError::Config { .. } | TedError::InvalidSpec(_) => ErrorCategory::Config,
            TedError::NumericalFailure { .. } | TedError::NonFinite(_) => ErrorCategory::Numerical,
            TedError::Io(_) | TedError::Csv(_) | TedError::Parse { .. } => ErrorCategory::Io,
            _ => ErrorCategory::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numerical,
    Io,
    Other,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Other => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Numerical => 3,
            ErrorCategory::Io => 4,
        }
    }
}
