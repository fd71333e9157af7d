use std::path::PathBuf;

/// Errors raised anywhere in the two-stage clustering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate domain [{lo}, {hi}]")]
    DegenerateDomain { lo: f64, hi: f64 },
    #[error("basis count {d} is smaller than the spline order {order}")]
    TooFewBasis { d: usize, order: usize },
    #[error("t = {t} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("time grid has zero variance; cannot detrend")]
    ConstantGrid,
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid mixture parameters: {0}")]
    InvalidMixture(String),
    #[error("need more observations than components (n = {n}, k = {k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("all observations are identical")]
    IdenticalData,
    #[error("empty input")]
    EmptyInput,
    #[error("retained count h = {h} is smaller than k = {k}")]
    TrimTooSmall { h: usize, k: usize },
    #[error("trim fraction {0} is outside [0, 1)")]
    InvalidTrim(f64),
    #[error("slope estimation needs at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },
    #[error("estimated slope {slope:e} is not positive; extend the candidate set of k")]
    NonPositiveSlope { slope: f64 },
    #[error("label arrays differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("dims {nx}x{ny}x{nz} declare {expected} voxels but {got} were read")]
    DimsMismatch {
        nx: usize,
        ny: usize,
        nz: usize,
        expected: usize,
        got: usize,
    },
    #[error("label {label} exceeds the cluster count {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 3 for numerical failures, 2 for everything a user
    /// can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonPositiveSlope { .. }
            | Error::NotPositiveDefinite
            | Error::IdenticalData
            | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
