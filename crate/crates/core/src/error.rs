use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("upstream integration diverged at t = {time} h")]
    IntegrationDiverged { time: f64 },
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("buffer record {0} holds no trajectories")]
    EmptyRecord(usize),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("proposal density is zero where the target is positive (trajectory {trajectory} of record {record})")]
    AbsoluteContinuity { record: usize, trajectory: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("enumeration of {count} trajectories exceeds the cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },
    #[error("statistic undefined: {0}")]
    Undefined(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
