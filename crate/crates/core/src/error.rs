use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no such head: task {0}")]
    NoSuchHead(usize),

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("diverged{}", match .task { Some(t) => format!(" while training task {t}"), None => String::new() })]
    Diverged { task: Option<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("{field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("misaligned vectors: expected length {expected}, got {got}")]
    Misaligned { expected: usize, got: usize },

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("support escapes range")]
    SupportEscapesRange,

    #[error("invalid distribution: {0}")]
    InvalidPmf(String),

    #[error("frozen bits overflow: {requested} > {total}")]
    CapacityOverflow { requested: u32, total: u32 },

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("{}: not an IDX file", .0.display())]
    NotIdx(PathBuf),

    #[error("{}: unexpected EOF", .0.display())]
    UnexpectedEof(PathBuf),

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
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
