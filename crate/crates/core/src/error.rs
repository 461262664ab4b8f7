use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("grid too small: {0}")]
    GridTooSmall(String),
    #[error("seed point {0:?} is outside the tracking mask")]
    SeedOutsideMask([f64; 3]),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("mask is empty")]
    EmptyMask,
    #[error("refined mask is empty; tracking impossible")]
    EmptyRefinedMask,
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("source {source_index} supplies {available} trajectories, needs {needed}")]
    Shortfall { source_index: usize, available: usize, needed: usize },
    #[error("pool holds {available} trajectories, needs {needed}")]
    InsufficientPool { available: usize, needed: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("wrong dataset kind: expected {expected}")]
    DatasetKind { expected: &'static str },
    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
