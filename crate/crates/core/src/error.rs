use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or sizes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Malformed or unreadable user input (files, rasters, configs).
    #[error("input error: {0}")]
    Input(String),

    /// Input that makes the computation undefined, e.g. an all-zero weight.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A required collaborator (checkpoint, feature extractor) is missing or failed.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("training diverged at level {level}, step {step}: {detail}")]
    Divergence {
        level: usize,
        step: u64,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
