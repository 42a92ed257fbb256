use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("parameter schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("collaborator `{0}` is missing prev_params past the regularization onset")]
    MissingPrevParams(String),

    #[error("collaborator `{0}` reported a zero sample count")]
    ZeroSamples(String),

    #[error("roster is empty")]
    EmptyRoster,

    #[error("duplicate collaborator id `{0}`")]
    DuplicateId(String),

    #[error("window fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("invalid shard spec: {0}")]
    BadSpec(String),

    #[error("shard is empty")]
    EmptyShard,

    #[error("no round records")]
    EmptyRecords,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config does not match checkpoint: {0}")]
    ConfigMismatch(String),

    #[error("configs are not comparable: {0}")]
    IncomparableConfigs(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
