use thiserror::Error;

use crate::agent::AgentError;
use crate::dataset::DatasetError;
use crate::encoder::EncoderError;
use crate::env::EnvError;
use crate::graph::GraphError;
use crate::transe::EmbeddingError;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid or inconsistent settings.
    Config,
    /// Missing, unreadable or malformed inputs.
    Data,
    /// Failures while running: remote encoder, divergence, internal shape errors.
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use crate::dataset::DatasetError as D;
        use crate::agent::AgentError as A;
        use crate::transe::EmbeddingError as E;
        match self {
            Error::Config(_) | Error::Encoder(EncoderError::Config(_)) | Error::Embedding(E::Config(_)) => ErrorKind::Config,
            Error::Dataset(D::Split(_)) => ErrorKind::Config,
            Error::Graph(_) | Error::Dataset(_) | Error::Embedding(_) | Error::Io { .. } => ErrorKind::Data,
            Error::Agent(A::Io(_) | A::Format(_)) => ErrorKind::Data,
            Error::Env(_) | Error::Encoder(_) | Error::Agent(_) | Error::NonFinite(_) => ErrorKind::Runtime,
        }
    }
}
