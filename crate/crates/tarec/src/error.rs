//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the pipeline, partitioned into the classes the CLI
/// maps onto exit codes (data, training, checkpoint, eval, probe).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty corpus: all interactions removed by filtering")]
    EmptyCorpus,

    #[error("split too small: need at least {min} examples, got {got}")]
    SplitTooSmall { min: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("item index {index} out of range for vocabulary of {vocab}")]
    Index { index: u32, vocab: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("probe error: {0}")]
    Probe(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
