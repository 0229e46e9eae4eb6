use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("out of range: {0}")]
    Range(String),
    #[error("unknown expression {0:?}")]
    UnknownExpression(String),
    #[error("presets file not found: {}", .0.display())]
    MissingPresetFile(PathBuf),
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters not initialised: {0}")]
    UninitializedParams(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("embedding has zero norm")]
    ZeroEmbedding,
    #[error("missing loss component `{0}`")]
    MissingComponent(String),
    #[error("data exhausted: {0}")]
    DataExhausted(String),
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: u64, report: String },
    #[error("image {0:?} has no annotation row")]
    MissingAnnotation(String),
    #[error("cannot decode {}: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("covariance is not positive semi-definite")]
    NonPsdCovariance,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
