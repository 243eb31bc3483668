use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular network: {0}")]
    SingularNetwork(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line runner.
    ///
    /// 3 covers configuration and input validation, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Topology(_)
            | Error::Config(_)
            | Error::MissingFile(_)
            | Error::Format { .. }
            | Error::Json { .. } => 3,
            Error::SingularNetwork(_)
            | Error::Singular(_)
            | Error::Divergence(_)
            | Error::NonFinite(_) => 4,
            Error::Shape(_) | Error::Io { .. } => 1,
        }
    }
}
