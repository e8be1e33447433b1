use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocabulary target size {0} leaves no room for the special tokens")]
    VocabTooSmall(usize),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },

    #[error("frame file {path}: {message}")]
    FrameFile { path: PathBuf, message: String },

    #[error("unknown synthesis task {0:?}")]
    UnknownTask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("nothing to predict")]
    NothingToPredict,

    #[error("expected exactly one [MASK] at the next title position, found {0}")]
    MaskCount(usize),

    #[error("no tokens to attend")]
    NoTokensToAttend,

    #[error("empty reference")]
    EmptyReference,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch in field `{0}`")]
    ConfigMismatch(String),

    #[error("refinement left no training samples")]
    EmptyFilteredSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Config(_) | Error::UnknownTask(_) | Error::VocabTooSmall(_) => 1,
            _ => 2,
        }
    }
}
