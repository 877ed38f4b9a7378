use std::io;

use thiserror::Error;

use crate::topology::ClusterId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("no connection {0} -> {1}")]
    MissingConnection(ClusterId, ClusterId),
    #[error("connection {0} -> {1} already exists")]
    ConnectionExists(ClusterId, ClusterId),
    #[error("cluster {id} has {neurons} neuron(s); splitting needs at least 2")]
    TooSmall { id: ClusterId, neurons: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
