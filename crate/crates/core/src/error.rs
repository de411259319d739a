use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate entity id {0:?}")]
    DuplicateEntity(String),
    #[error("invalid entity record: {0}")]
    InvalidEntity(String),
    #[error("unknown entity id {0:?}")]
    UnknownEntity(String),
    #[error("document {doc_id:?}: anchor {start}..{end} out of range for {len} tokens")]
    AnchorOutOfRange {
        doc_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("document {doc_id:?}: anchor {start}..{end} is not inside a single sentence")]
    AnchorCrossesSentence {
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("document {doc_id:?}: invalid sentence range {start}..{end}")]
    InvalidSentence {
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("holdout fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("zero vector for id {0:?}")]
    ZeroVector(String),
    #[error("both positive and negative labels are required")]
    SingleClass,
    #[error("empty query set")]
    EmptyQuerySet,
}
