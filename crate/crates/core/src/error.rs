//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by metric construction, transport, embedding and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),
    #[error("unbalanced measures: totals {left} and {right}")]
    UnbalancedMeasures { left: f64, right: f64 },
    #[error("incompatible support: {0}")]
    IncompatibleSupport(String),
    #[error("invalid injection: {0}")]
    InvalidInjection(String),
    #[error("invalid semi-partition: {0}")]
    InvalidSemipartition(String),
    #[error("fused clusters overlap: {0}")]
    FusionOverlap(String),
    #[error("invalid fusion: {0}")]
    InvalidFusion(String),
    #[error("unknown point {0}")]
    UnknownPoint(usize),
    #[error("invalid k: {0}")]
    InvalidK(String),
    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),
    #[error("cannot gather a unit of mass: total is {0}")]
    InfeasibleGather(f64),
    #[error("invalid adversary: {0}")]
    InvalidAdversary(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
