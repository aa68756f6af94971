use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular matrix (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("degenerate keypoint configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("duplicate source points {0} and {1} with lambda = 0")]
    DuplicatePoints(usize, usize),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("function is nondeterministic: {first} != {second}")]
    NondeterministicFunction { first: f64, second: f64 },

    #[error("grid extent {0} is too small (need at least 3)")]
    GridTooSmall(usize),

    #[error("non-finite activation in channel {0}")]
    NonFiniteActivation(usize),

    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: usize, value: f64 },

    #[error("mask is empty")]
    EmptyMask,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
