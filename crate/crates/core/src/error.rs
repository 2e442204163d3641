use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; `axis` names the offending axis or operand.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// A documented precondition of an operation was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("version error: {0}")]
    Version(String),

    #[error("truncated file {0}")]
    Truncated(PathBuf),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 runtime contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Checksum(_)
            | Error::Version(_)
            | Error::Truncated(_)
            | Error::Format { .. }
            | Error::MissingArtifacts(_) => 3,
            Error::Dimension { .. } | Error::Contract(_) => 4,
        }
    }
}
