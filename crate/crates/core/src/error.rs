use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    pub fn in_stage(stage: &'static str) -> impl Fn(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
