use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): needs finite coordinates with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("proposal {0} is in both the positive and the refined negative set")]
    Overlap(usize),

    #[error("insufficient positives: {0}")]
    InsufficientPositives(String),

    #[error("no training proposals left after labeling")]
    EmptyTrainingSet,

    #[error("box ({x1}, {y1}, {x2}, {y2}) has no area inside the {width}x{height} image")]
    EmptyCrop {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: usize,
        height: usize,
    },

    #[error("evaluation needs at least one frame")]
    NoFrames,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user input rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. } | Error::Json(_))
    }
}
