use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("snapshot {0} has no triples")]
    EmptySnapshot(usize),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("index {index} out of range (have {len})")]
    Index { index: usize, len: usize },

    #[error("cannot resolve entity {entity} at snapshot {snapshot}")]
    Resolution { entity: u32, snapshot: usize },

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("unknown {kind} id {id}")]
    Key { kind: &'static str, id: u32 },

    #[error("checkpoint version/shape mismatch: {0}")]
    Version(String),

    #[error("vector length mismatch: {left} vs {right}")]
    Dim { left: usize, right: usize },

    #[error("negative sampling needs at least 2 candidate entities, got {0}")]
    TooFewEntities(usize),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("irreversible recompression: {0}")]
    Irreversible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
