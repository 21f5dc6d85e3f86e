use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index error in {op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at episode {episode} (episode seed {seed}): {detail}")]
    Diverged {
        episode: usize,
        seed: u64,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
