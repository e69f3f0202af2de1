use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid model: {0}")]
    InvalidGraph(String),

    #[error("shape error at node `{node}`: {message}")]
    Shape { node: String, message: String },

    #[error(
        "memory planner state space too large ({what}: {actual} > {limit}); \
         simplify the graph or raise the planner limits"
    )]
    StateSpace {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    #[error("brute-force planner refuses graphs with more than {limit} nodes (got {actual})")]
    TooManyNodes { actual: usize, limit: usize },

    #[error("tensor shape mismatch: {0}")]
    TensorShape(String),

    #[error("node `{0}` is not prunable")]
    NotPrunable(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    FileSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("budget unreachable: {0}")]
    BudgetUnreachable(String),

    #[error("training diverged (non-finite loss) at step {step}; lower the learning rate")]
    Diverged { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
