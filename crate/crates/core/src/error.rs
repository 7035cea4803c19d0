use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("graph validation failed with {} violation(s): {}", .0.len(), format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("rewrite error: {0}")]
    Rewrite(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("sampling exhausted: requested {requested} samples but only {available} distinct sites are available")]
    SamplingExhausted { requested: usize, available: usize },

    #[error("wrong variant: {0}")]
    WrongVariant(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("weight blob {0} is missing")]
    MissingBlob(PathBuf),

    #[error(
        "weight blob checksum mismatch: manifest says {expected:#010x}, blob has {actual:#010x}"
    )]
    ChecksumMismatch { expected: u32, actual: u32 },

    #[error("shape inconsistency in `{node}`: {message}")]
    ShapeInconsistency { node: String, message: String },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("malformed manifest: {0}")]
    Malformed(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
