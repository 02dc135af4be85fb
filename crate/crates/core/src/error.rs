use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid edge ({0}, {1}): node id out of range for {2} nodes")]
    InvalidEdge(usize, usize, usize),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch too small: {op} needs at least 2 rows, got {rows}")]
    BatchTooSmall { op: &'static str, rows: usize },

    #[error("invalid probability {0}: must lie in [0, 1)")]
    InvalidProbability(f64),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("epoch {epoch} out of range for a {n_epochs}-epoch schedule")]
    InvalidEpoch { epoch: usize, n_epochs: usize },

    #[error("training diverged: non-finite loss at epoch {0}")]
    Divergence(usize),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("cannot evaluate on an empty node set")]
    EmptyEvaluation,

    #[error("invalid split: {0}")]
    Split(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("bad checkpoint header")]
    BadCheckpointHeader,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}
