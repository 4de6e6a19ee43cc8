use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the augmentation and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("utterance {id}: {tokens} tokens but {labels} labels")]
    LengthMismatch {
        id: String,
        tokens: usize,
        labels: usize,
    },
    #[error("utterance {id}: invalid BIO at index {index}: {reason}")]
    InvalidBio {
        id: String,
        index: usize,
        reason: String,
    },
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("duplicate id {0:?} in dataset")]
    DuplicateId(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty vocabulary after filtering")]
    EmptyVocabulary,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("mask position {position} out of range for sequence of length {len}")]
    MaskOutOfRange { position: usize, len: usize },
    #[error("missing resource: {0}")]
    MissingResource(String),
    #[error("undefined perturbation recovery rate: baseline clean and perturbed F1 are equal ({0})")]
    UndefinedRecoveryRate(f64),
    #[error("alignment mismatch: {0}")]
    Alignment(String),
    #[error("perturbation key mismatch: {0}")]
    KeyMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
