use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profiles cover different level ranges: [{0}, {1}] vs [{2}, {3}]")]
    RangeMismatch(i32, i32, i32, i32),
    #[error("level {level} outside range [{lo}, {hi}]")]
    LevelOutOfRange { level: i32, lo: i32, hi: i32 },
    #[error("exponent hypothesis violated between levels {i} and {j}")]
    HypothesisViolated { i: i32, j: i32 },
    #[error("not admissible: {0}")]
    NotAdmissible(String),
    #[error("model exceeds budget: {needed} > {budget}")]
    Budget { needed: usize, budget: usize },
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("nodes {0} and {1} are disconnected")]
    Disconnected(usize, usize),
    #[error("solver did not converge after {iterations} iterations (best value {best}, residual {residual})")]
    NoConvergence { iterations: usize, best: f64, residual: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
