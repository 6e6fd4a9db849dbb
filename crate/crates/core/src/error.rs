use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("capacity exceeded: {needed} values do not fit in {slots} slots")]
    Capacity { needed: usize, slots: usize },

    #[error("slot count mismatch: {left} vs {right}")]
    SlotMismatch { left: usize, right: usize },

    #[error("invalid engine parameters: {0}")]
    Params(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: at byte offset {offset}: {msg}", path.display())]
    Ingest { path: PathBuf, offset: u64, msg: String },

    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },

    #[error("verification mismatch: {0}")]
    Verification(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Input { path: path.into(), msg: msg.into() }
    }
}
