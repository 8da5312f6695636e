use thiserror::Error;

/// Errors produced by the allocation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies within the exclusion ball of the projection pole")]
    PoleSingularity,

    #[error("evaluation point coincides with source {index}")]
    SourceSingularity { index: usize },

    #[error("force tree has not been built for this configuration")]
    TreeNotBuilt,

    #[error("trajectory state became non-finite after {steps} steps")]
    NonFiniteState { steps: u64 },

    #[error("root finding failed: {0}")]
    RootFindingFailed(String),

    #[error("gradient norm {norm:e} exceeds the critical-point tolerance {tol:e}")]
    NotCritical { norm: f64, tol: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("statistic requires a non-empty sample")]
    EmptySample,

    #[error("coupling weights are degenerate: row {row} received no samples")]
    DegenerateWeights { row: usize },

    #[error("study config invalid: {0}")]
    ConfigInvalid(String),

    #[error("study failed: {0}")]
    StudyFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
