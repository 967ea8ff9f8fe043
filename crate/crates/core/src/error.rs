use std::path::PathBuf;

use thiserror::Error;

use crate::model::{Digest, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layer {0} has zero compressed bytes")]
    EmptyLayer(Digest),
    #[error("image {0} has no layers")]
    NoLayers(String),
    #[error("shared base is not the first layer of image {0}")]
    BaseNotFirst(String),
    #[error("digest {0} registered with different sizes")]
    DigestConflict(Digest),
    #[error("image name {0} registered twice with different content")]
    DuplicateImage(String),
    #[error("thresholds must satisfy 0 < low ({low}) < high ({high}) < hard ({hard}) <= 1")]
    Thresholds { low: f64, high: f64, hard: f64 },
    #[error("parallel pulls and sockets per image must be at least 1")]
    ZeroParallelism,
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("baseline disk usage exceeds capacity")]
    BaselineExceedsDisk,
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("event scheduled at {at}s but clock is already {clock}s")]
    SchedulingInPast { at: f64, clock: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown or already removed object {0}")]
    UnknownObject(u64),
    #[error("attack plan has no images")]
    EmptyImageSet,
    #[error("unknown image {0}")]
    UnknownImage(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scheduling delay undefined for zero compressed bytes")]
    ZeroBytes,
    #[error("averaging window [{start}, {end}] is empty or outside the trace")]
    EmptyWindow { start: f64, end: f64 },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Parse { .. } => 2,
            ScenarioError::Validation(_) => 3,
            ScenarioError::Io { .. } => 4,
        }
    }
}

impl From<ModelError> for ScenarioError {
    fn from(e: ModelError) -> Self {
        ScenarioError::Validation(e.to_string())
    }
}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        ScenarioError::Validation(e.to_string())
    }
}
