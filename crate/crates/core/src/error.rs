use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CigError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CigError {
    #[error("category {0} missing from dataset root")]
    MissingCategory(u32),

    #[error("no category directories found under {0}")]
    NoCategories(PathBuf),

    #[error("unexpected entry {0} in dataset root (category directories must be named 1..K)")]
    BadCategoryName(PathBuf),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("image {path} has shape {actual:?}, expected {expected:?}")]
    ImageShape {
        path: PathBuf,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("label {label} out of range 1..={k}")]
    LabelOutOfRange { label: u32, k: usize },

    #[error("no non-empty category adjacent to {0}")]
    NoReferenceAvailable(u32),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl CigError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CigError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CigError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        CigError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            CigError::InvalidConfig { .. } | CigError::ConfigMismatch(_) | CigError::Json(_)
        )
    }
}
