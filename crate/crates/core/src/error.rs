use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("datapoint field `{0}` is missing")]
    MissingField(&'static str),

    #[error("datapoint field `{0}` is empty")]
    EmptyField(&'static str),

    #[error("unknown content type `{0}`")]
    UnknownContentType(String),

    #[error("unknown content id {0}")]
    UnknownContent(u64),

    #[error("review job {0} does not exist or is closed")]
    NoOpenJob(u64),

    #[error("k = {k} is outside [1, {distinct}]")]
    ClusterCount { k: usize, distinct: usize },

    #[error("cannot cluster an empty point set")]
    EmptyPoints,

    #[error("score weights must be non-negative and sum to 1 (got {alpha}, {beta}, {gamma})")]
    InvalidWeights { alpha: f64, beta: f64, gamma: f64 },

    #[error("pass rate is undefined for a key with zero runs")]
    UndefinedRate,

    #[error("coverage is undefined: the reference universe is empty")]
    UndefinedCoverage,

    #[error("line {line} of {path}: {source}")]
    JsonLine {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
