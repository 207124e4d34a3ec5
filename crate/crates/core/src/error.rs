use std::path::PathBuf;

use thiserror::Error;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dim {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid rank {rank} for a {d}x{k} projection")]
    InvalidRank { rank: usize, d: usize, k: usize },

    #[error("no prototype for class {0}")]
    MissingPrototype(ClassId),

    #[error("class {0} is not in the active class subset")]
    ClassNotInSubset(ClassId),

    #[error("upload from client {client} has no entry for class {class}")]
    MissingClassEntry { client: usize, class: ClassId },

    #[error("class {0} was already introduced by an earlier task")]
    ClassCollision(ClassId),

    #[error("sample counts sum to zero; nothing to aggregate")]
    ZeroSampleCount,

    #[error("partition impossible: {0}")]
    Partition(String),

    #[error("{0}")]
    Diagnostic(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: file contains no rows")]
    CsvEmpty { path: PathBuf },

    #[error("{path}:{line}: ragged row, expected {expected} fields, found {found}")]
    CsvRagged {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: field `{field}` is not a valid {what}")]
    CsvField {
        path: PathBuf,
        line: usize,
        field: String,
        what: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
