//! Crate-wide error type.

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
    #[error("bad magic: not a RACKPT01 container")]
    BadMagic,
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("header/data mismatch: {0}")]
    HeaderMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),
    #[error("invalid tensor name: {0}")]
    InvalidName(String),
    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("malformed glob pattern: {0:?}")]
    BadPattern(String),
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoints share no tensors")]
    EmptySharedSet,
    #[error("adapter target missing from base checkpoint: {0}")]
    MissingTarget(String),
    #[error("zero column norm in {name}, column {col}")]
    ZeroColumnNorm { name: String, col: usize },
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("all-pad input: {0}")]
    AllPadInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("target patterns match no tensors")]
    NoTargetMatch,
    #[error("{file}:{line}: {msg}")]
    DatasetFormat {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("qrels references unknown id: {0}")]
    DanglingId(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::DuplicateName(_) => "duplicate_name",
            Error::InvalidName(_) => "invalid_name",
            Error::InvalidTensor { .. } => "invalid_tensor",
            Error::BadPattern(_) => "bad_pattern",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::EmptySharedSet => "empty_shared_set",
            Error::MissingTarget(_) => "missing_target",
            Error::ZeroColumnNorm { .. } => "zero_column_norm",
            Error::MissingTensor(_) => "missing_tensor",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::AllPadInput(_) => "all_pad_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Divergence { .. } => "divergence",
            Error::NoTargetMatch => "no_target_match",
            Error::DatasetFormat { .. } => "dataset_format",
            Error::DanglingId(_) => "dangling_id",
            Error::MissingFile(_) => "missing_file",
            Error::Json(_) => "json",
            Error::Invalid(_) => "invalid",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
