use thiserror::Error;

/// Errors surfaced by graph construction, model evaluation, and the
/// training/evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bounding box: ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("center angle undefined: boxes share the same center")]
    CoincidentCenters,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{context}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("too many regions: {got} exceeds the configured maximum {max}")]
    TooManyRegions { got: usize, max: usize },

    #[error("unknown dependency relation: {0:?}")]
    UnknownRelation(String),

    #[error("mixed modalities: expected {expected}, found {found}")]
    MixedModalities { expected: String, found: String },

    #[error("graph is missing its hub slot ({0})")]
    MissingHub(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("candidate count mismatch: got {got}, configured {expected}")]
    CandidateCount { got: usize, expected: usize },

    #[error("relevance vector has no positive entries")]
    AllZeroRelevance,

    #[error("masked edge touches a masked node ({src}, {dst})")]
    MaskedEndpoint { src: usize, dst: usize },

    #[error("checkpoint/config mismatch: checkpoint {ckpt_hash}, requested {cfg_hash}")]
    ConfigMismatch { ckpt_hash: String, cfg_hash: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("unknown ablation: {0:?} (expected lambda0 | no_warmup | no_sharing | no_hub)")]
    UnknownAblation(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
