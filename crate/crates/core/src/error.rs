use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read NIfTI {path}: {message}")]
    Nifti { path: PathBuf, message: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch: {what}: {left:?} vs {right:?}")]
    DimensionMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid segmentation label {value} (labels must be non-negative integers)")]
    InvalidLabel { value: f64 },
    #[error("range error: {0}")]
    Range(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("malformed data in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

impl Error {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) | Error::MissingFile(_) => 3,
            Error::StageMismatch { .. } => 5,
            _ => 4,
        }
    }
}
