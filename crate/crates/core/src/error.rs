use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("too few samples: got {0}, need at least 3")]
    TooFewSamples(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point ({x}, {y}) is outside the Frenet domain of the track")]
    OutsideFrenetDomain { x: f64, y: f64 },
    #[error("arc length {p_x} outside [0, {length}] on an open track")]
    OutOfRange { p_x: f64, length: f64 },
    #[error("track too narrow at sample {index}: width {width} <= vehicle width {w_veh}")]
    TrackTooNarrow {
        index: usize,
        width: f64,
        w_veh: f64,
    },
    #[error("friction {mu} outside [{min}, {max}]")]
    FrictionOutOfRange { mu: f64, min: f64, max: f64 },
    #[error("singular Frenet transform: 1 - kappa * p_y = {0}")]
    SingularFrenet(f64),
    #[error("MPC objective is not finite")]
    NonFiniteObjective,
    #[error("could not sample non-overlapping start positions after {0} attempts")]
    StartSamplingFailed(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no potential samples")]
    EmptySamples,
    #[error("value range {0} is too small to normalize against")]
    DegenerateRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad user input (as opposed to failures while running).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteObjective | Error::StartSamplingFailed(_) | Error::Io(_)
        )
    }
}
