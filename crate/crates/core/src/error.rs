use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sphere dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("cannot normalize a zero or non-finite vector")]
    DegenerateVector,

    #[error("points are antipodal (inner product {inner})")]
    AntipodalPoints { inner: f64 },

    #[error("degenerate geodesic: endpoints coincide or are antipodal")]
    DegenerateGeodesic,

    #[error("coordinate {index} is negative ({value}) beyond tolerance")]
    NegativeCoordinate { index: usize, value: f64 },

    #[error("probabilities are not normalized (sum {sum})")]
    NotNormalized { sum: f64 },

    #[error("time {t} outside of [0, {horizon})")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("value {value} outside of domain: {what}")]
    OutOfDomain { what: &'static str, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series for the damped Kummer function did not converge at rho = {rho}")]
    SeriesNonConvergence { rho: f64 },

    #[error("initial point is not radially symmetric: <u, e_k> ranges over [{min}, {max}]")]
    RadialSymmetry { min: f64, max: f64 },

    #[error("table does not match the run: {0}")]
    TableMismatch(String),

    #[error("checkpoint does not match the run: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("backward called with a cache from a different forward pass")]
    CacheMismatch,

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
