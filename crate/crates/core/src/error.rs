use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the loop-closure toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("degenerate point configuration (covariance rank < 2)")]
    DegenerateConfiguration,

    #[error("rotation angle {angle:.6} rad is outside the small-angle regime (< pi/2)")]
    RotationTooLarge { angle: f64 },

    #[error("point cloud has no normals")]
    MissingNormals,

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("no correspondences within {epsilon} m")]
    NoCorrespondences { epsilon: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("too few associated poses: need at least {needed}, got {got}")]
    TooFewAssociations { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at {position}: {message}")]
    Parse { position: Position, message: String },

    #[error("unsupported PLY property `{0}`")]
    UnsupportedProperty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Location of a parse failure: a 1-based text line or a byte offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Line(usize),
    Offset(usize),
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Position::Line(l) => write!(f, "line {l}"),
            Position::Offset(o) => write!(f, "byte offset {o}"),
        }
    }
}

impl Error {
    pub(crate) fn parse_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            position: Position::Line(line),
            message: message.into(),
        }
    }

    pub(crate) fn parse_offset(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            position: Position::Offset(offset),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
