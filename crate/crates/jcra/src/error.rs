use std::path::PathBuf;

/// Process exit codes of the `jcra` binary.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const SCHEMA: u8 = 2;
    pub const GRADCHECK: u8 = 3;
    pub const NON_FINITE: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{failed} gradient check(s) out of tolerance")]
    GradCheck { failed: usize },
    #[error(transparent)]
    Core(#[from] jcra_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } => exit::IO,
            Error::Schema(_) => exit::SCHEMA,
            Error::Checkpoint(_) => exit::CHECKPOINT,
            Error::GradCheck { .. } => exit::GRADCHECK,
            Error::Core(jcra_core::Error::NonFiniteLoss(_)) => exit::NON_FINITE,
            Error::Core(_) => exit::SCHEMA,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
