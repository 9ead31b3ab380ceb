use thiserror::Error;

pub type Result<T, E = DsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DsmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated {0}")]
    Truncated(String),

    #[error("section {section}: {message}")]
    Section { section: String, message: String },

    #[error("non-finite value at ({scale},{channel},{row},{col})")]
    NonFinite { scale: usize, channel: usize, row: usize, col: usize },

    #[error("negative value at ({scale},{channel},{row},{col})")]
    Negative { scale: usize, channel: usize, row: usize, col: usize },

    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Invalid(String),

    #[error("degenerate activations")]
    DegenerateActivations,

    #[error("degenerate descriptor")]
    DegenerateDescriptor,

    #[error("rank deficiency after regularization")]
    RankDeficient,

    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),

    #[error("unknown image id {0:?}")]
    UnknownImageId(String),
}

impl DsmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DsmError::Invalid(msg.into())
    }

    pub(crate) fn section(section: &str, message: impl Into<String>) -> Self {
        DsmError::Section { section: section.to_string(), message: message.into() }
    }
}
