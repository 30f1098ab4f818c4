use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("duplicate note_id {0:?}")]
    DuplicateNoteId(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training data has a single label class ({0})")]
    SingleClass(u8),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("scorer failed at position {position}: {source}")]
    ScorerAt {
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replay stub has no entry for {0:?}")]
    ReplayMiss(String),

    #[error("unknown group {group:?}; known groups: {known:?}")]
    UnknownGroup { group: String, known: Vec<String> },

    #[error("empty slice for group {0:?}")]
    EmptySlice(String),

    #[error("confusion counts are all zero")]
    EmptyCounts,

    #[error("cannot remove {requested} non-SL tokens, only {available} available")]
    TooManyRemovals { requested: usize, available: usize },

    #[error("missing metadata: {0}")]
    MissingMetadata(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
