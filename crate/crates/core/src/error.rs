use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reference set")]
    EmptyReference,

    #[error("point set must contain at least one point")]
    EmptyPointSet,

    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("cannot sample {requested} points from a set of {available}")]
    SampleCount { requested: usize, available: usize },

    #[error("{what}: expected {expected} entries, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate feature: row {row} of the {side} features has zero norm")]
    DegenerateFeature { side: &'static str, row: usize },

    #[error("selection replay diverged: {0}")]
    SelectionReplay(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss on scene '{scene_id}' (epoch {epoch}, step {step})")]
    NonFiniteLoss {
        scene_id: String,
        epoch: usize,
        step: usize,
    },

    #[error("missing ground-truth flow for scenes: {}", .0.join(", "))]
    MissingGroundTruth(Vec<String>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Checkpoint { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
