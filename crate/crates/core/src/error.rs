use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("orbit diverged on every attempt for sequence {sequence} ({attempts} attempts)")]
    DivergentOrbit { sequence: usize, attempts: usize },
    #[error("format error: {0}")]
    Format(String),
    /// Training aborted on a non-finite objective; carries the last checkpoint
    /// whose parameters were all finite, when one exists.
    #[error("non-finite loss: {message}")]
    NonFiniteLoss { message: String, last_good: Option<Box<crate::models::Checkpoint>> },
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("stage mismatch: {0}")]
    StageMismatch(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("invalid k: {0}")]
    InvalidK(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
