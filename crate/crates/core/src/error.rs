use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value outside the loss domain: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown tissue class token {token:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    UnknownClass { token: String, line: Option<usize> },

    #[error("unknown stain domain token {token:?} on line {line}")]
    UnknownDomain { token: String, line: usize },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("manifest entry on line {line}: file {file} does not exist")]
    MissingPatch { line: usize, file: PathBuf },

    #[error("manifest entry on line {line}: cannot read image {file}: {message}")]
    UnreadablePatch { line: usize, file: PathBuf, message: String },

    #[error("manifest entry on line {line}: duplicate path {file}")]
    DuplicatePath { line: usize, file: PathBuf },

    #[error("no patches available for domain {domain} class {class}")]
    EmptyCell { domain: String, class: String },

    #[error("not enough patches per class: {0}")]
    InsufficientPatches(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no matting Laplacian cached for patch {0:?}")]
    CacheMiss(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
