use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("image shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("attribute index {0} out of range")]
    AttributeOutOfRange(usize),

    #[error("unknown attribute name {0:?}")]
    UnknownAttribute(String),

    #[error("degree {0} outside 0..=5")]
    DegreeOutOfRange(i64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("training gate failed: {0}")]
    TrainingGate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate sample set: {0}")]
    Degenerate(String),

    #[error("empty template pool: {0}")]
    EmptyPool(String),

    #[error("illegal dialog transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },

    #[error("session has ended")]
    SessionEnded,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}
