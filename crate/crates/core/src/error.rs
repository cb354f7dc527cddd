use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: every element is masked out")]
    DegenerateBatch,

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("training diverged at step {step} (patch {time_id}): loss is not finite")]
    Diverged { step: u64, time_id: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised while parsing the on-disk formats (station CSV, ESRI ASCII
/// grids and checkpoints). Each variant names what was wrong.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file is empty or has no header row")]
    MissingHeader,

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: column `{column}` holds malformed number {value:?}")]
    MalformedNumber {
        line: u64,
        column: String,
        value: String,
    },

    #[error("line {line}: column `{column}` is invalid: {reason}")]
    InvalidField {
        line: u64,
        column: String,
        reason: String,
    },

    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("grid header is missing `{0}`")]
    MissingHeaderKey(&'static str),

    #[error("grid header key `{key}` is invalid: {reason}")]
    InvalidHeader { key: String, reason: String },

    #[error("grid body holds {found} values, header promises {expected}")]
    BodyCount { expected: usize, found: usize },

    #[error("grid body value {value:?} at index {index} is not a number")]
    BodyValue { index: usize, value: String },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),

    #[error("checkpoint: file is truncated")]
    Truncated,

    #[error("checkpoint tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
