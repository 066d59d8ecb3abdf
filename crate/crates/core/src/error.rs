use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("need at least 2 rows to compute statistics, got {rows}")]
    StatsInsufficientData { rows: usize },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("paired matrices differ in row count: {left} vs {right}")]
    PairMismatch { left: usize, right: usize },

    #[error("cannot build datastore: {0}")]
    BuildError(String),

    #[error("duplicate caption id {0}")]
    DuplicateId(u64),

    #[error("format error at byte {offset}: {reason}")]
    FormatError { offset: u64, reason: String },

    #[error("{path}:{line}: {reason}")]
    JsonLines {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("datastore is empty")]
    EmptyStore,

    #[error("datastore holds {available} eligible records, need {needed}")]
    InsufficientStore { needed: usize, available: usize },

    #[error("evaluation corpus is empty")]
    EmptyCorpus,

    #[error("no candidates to re-rank")]
    EmptyCandidates,

    #[error("cannot build a prompt from zero captions")]
    EmptyPrompt,

    #[error("invalid k {k}: {reason}")]
    InvalidK { k: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::FormatError {
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected, actual })
        }
    }
}
