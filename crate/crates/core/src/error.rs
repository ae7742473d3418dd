use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph has no edges")]
    EmptyEdgeSet,

    #[error("degree distribution has zero total edge weight")]
    ZeroEdgeWeight,

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite utility for state {state}")]
    NonFiniteUtility { state: usize },

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("invalid transition record at index {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("no transition records")]
    EmptyRecords,

    #[error("degenerate switching: A_l + B_l = 0 at l = {l}, theta = {theta}")]
    DegenerateSwitching { l: usize, theta: f64 },

    #[error("unstable fixed point: 1 - phi'(theta*) = {margin} <= 0")]
    UnstableFixedPoint { margin: f64 },

    #[error("integration unstable at t = {t}: simplex violation {violation:e}; try a smaller step")]
    IntegrationInstability { t: f64, violation: f64 },

    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
