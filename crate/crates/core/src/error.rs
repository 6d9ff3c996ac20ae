use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LstdError {
    #[error(transparent)]
    Tensor(#[from] ndgrad::NdError),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite loss component `{component}` at iteration {iteration}")]
    Diverged {
        component: &'static str,
        iteration: usize,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl LstdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LstdError>;
