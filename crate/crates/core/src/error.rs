use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid UTF-8 on line {line} at byte offset {offset}")]
    Decode { line: usize, offset: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tokenizer training failed: {0}")]
    Training(String),

    #[error("tokenizer file error: {0}")]
    TokenizerFormat(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenRange { id: u32, vocab_size: usize },

    #[error("CHAT parse error on line {line}: {message}")]
    ChatParse { line: usize, message: String },

    #[error("cannot stratify: label `{label}` has no samples")]
    Stratification { label: String },

    #[error("ingest error on row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("schedule exhausted: step {step} > total {total}")]
    ScheduleExhausted { step: u64, total: u64 },

    #[error("learning-rate range test failed, no rate improved the loss; trace (lr, loss): {trace:?}")]
    RangeTestFailed { trace: Vec<(f64, f64)> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("sweep failed: {0}")]
    Sweep(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite { .. }
            | Error::ScheduleExhausted { .. }
            | Error::RangeTestFailed { .. } => ErrorKind::Numeric,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
