use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("point lies on the camera plane (|Z| = {0:e})")]
    BehindCamera(f64),
    #[error("invalid rotation: orthonormality residual {0:e}")]
    InvalidRotation(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("degenerate feature: norm {0:e} is too small to normalize")]
    DegenerateFeature(f64),
    #[error("no candidate pixels to match against")]
    NoCandidates,
    #[error("insufficient correspondences: need {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("pose database is empty")]
    EmptyDatabase,
    #[error("no ground-truth correspondences after {0} attempts")]
    NoCorrespondences(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
