use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {node}: {source}")]
    AtNode {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("segment {segment}: trace buffers were not retained")]
    MissingTrace { segment: usize },

    #[error("segment {segment}: no feedback matrix for this strategy")]
    MissingFeedback { segment: usize },

    #[error("segment {segment}: non-finite gradient, step aborted")]
    NonFiniteGradient { segment: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("truncated {format} payload: expected {expected} bytes, found {actual}")]
    Truncated {
        format: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("every run in the grid failed")]
    AllRunsFailed,
}

impl Error {
    pub(crate) fn at_node(self, node: usize) -> Self {
        match self {
            e @ Error::AtNode { .. } => e,
            e => Error::AtNode {
                node,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
