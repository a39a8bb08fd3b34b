use std::fmt;
use std::path::PathBuf;

use crate::corpus::Source;

/// A single problem found while validating a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestViolation {
    /// `line` is 1-based; `field` names the offending key.
    Schema {
        line: usize,
        field: String,
        reason: String,
    },
    DuplicateId {
        line: usize,
        id: String,
    },
}

impl fmt::Display for ManifestViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Schema {
                line,
                field,
                reason,
            } => write!(f, "line {line}: field `{field}`: {reason}"),
            Self::DuplicateId { line, id } => write!(f, "line {line}: duplicate id `{id}`"),
        }
    }
}

fn join_violations(v: &[ManifestViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("invalid manifest: {}", join_violations(.0))]
    Manifest(Vec<ManifestViolation>),

    #[error("invalid split ratios: {0}")]
    Ratio(String),

    #[error("record `{0}` already has a split assigned")]
    SplitAssigned(String),

    #[error("no records available for source {0:?}")]
    EmptyPool(Source),

    #[error("audio decode error: {0}")]
    Decode(String),

    #[error("audio contains no samples")]
    EmptyAudio,

    #[error("midi decode error: {0}")]
    MidiDecode(String),

    #[error("no text elements to compose")]
    EmptyElements,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch size mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("no checkpoints to select from")]
    EmptyCheckpointList,

    #[error("embedding store is empty")]
    EmptyStore,

    #[error("no ranks to summarise")]
    EmptyRanks,

    #[error("rank {rank} outside [1, {n_items}]")]
    RankOutOfRange { rank: usize, n_items: usize },

    #[error("embedding stores disagree on ids: {0}")]
    IdMismatch(String),

    #[error("audio and symbolic embeddings cancel out for `{0}`")]
    FusionDegenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
