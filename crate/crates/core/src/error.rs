//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input events violate an ordering or identity requirement.
    #[error("invalid timeline: {0}")]
    InvalidTimeline(String),

    /// A label or split cannot be computed because the anchoring
    /// admission or discharge marker is absent.
    #[error("missing reference marker: {0}")]
    MissingReference(String),

    /// The observation window ends before any event is visible.
    #[error("empty query window: {0}")]
    EmptyQuery(String),

    /// A metric is undefined for the given inputs (e.g. one-class labels).
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// An encoder was asked to pool a sequence with no real tokens.
    #[error("empty sequence: {0}")]
    EmptySequence(String),

    /// A pooled vector has zero norm and cannot be unit-normalized.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Shape or parameter mismatch between model components.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// On-disk artifact is malformed or was written by an
    /// incompatible version.
    #[error("corrupt artifact {path}: {reason}")]
    CorruptArtifact { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
