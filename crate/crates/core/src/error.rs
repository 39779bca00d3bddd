use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid solution: {0}")]
    InvalidSolution(#[from] crate::routing::Violation),

    #[error("infeasible action {action}: {reason}")]
    InfeasibleAction { action: usize, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("replay buffer holds {len} transitions, {requested} requested")]
    NotReady { len: usize, requested: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
