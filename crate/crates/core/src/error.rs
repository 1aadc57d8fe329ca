//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SluError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}, utterance {id}: {tokens} tokens but {slots} slot tags")]
    LengthMismatch {
        line: usize,
        id: String,
        tokens: usize,
        slots: usize,
    },

    #[error("line {line}: duplicate utterance id {id}")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}, utterance {id}: empty token at position {position}")]
    EmptyToken {
        line: usize,
        id: String,
        position: usize,
    },

    #[error("line {line}, utterance {id}: utterance has no tokens")]
    EmptyUtterance { line: usize, id: String },

    #[error("invalid slot tag {tag:?}")]
    InvalidSlotTag { tag: String },

    #[error("split manifest sets overlap on intent {intent}")]
    ManifestOverlap { intent: String },

    #[error("manifest intent {intent} not found in any dataset")]
    ManifestUnknownIntent { intent: String },

    #[error("intent {intent} has {available} utterances, {required} required")]
    IntentPoolTooSmall {
        intent: String,
        available: usize,
        required: usize,
    },

    #[error("pretrain n-way sampling needs at least 3 intents, got {got}")]
    TooFewIntents { got: usize },

    #[error("remove count c={c} must be smaller than k_s={k_s}")]
    RemoveTooLarge { c: usize, k_s: usize },

    #[error("intent {intent}: replacement pool has {available} utterances outside the episode, {required} required")]
    ReplacePoolTooSmall {
        intent: String,
        available: usize,
        required: usize,
    },

    #[error("empty token sequence in alignment input")]
    EmptyAlignmentInput,

    #[error("alignment covers {ops} reference positions but {tags} tags were given")]
    AlignmentLengthMismatch { ops: usize, tags: usize },

    #[error("no hypothesis for utterance id {id}")]
    MissingHypothesis { id: String },

    #[error("embedding file {path}, line {line}: {message}")]
    EmbeddingParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("paired metrics refer to different episodes ({a:?} vs {b:?})")]
    EpisodeIdentityMismatch { a: (u64, u64), b: (u64, u64) },

    #[error("{0}")]
    Other(String),
}

impl SluError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SluError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
