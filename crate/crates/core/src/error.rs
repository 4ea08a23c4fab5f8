use std::path::PathBuf;

use crate::io::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {what} expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureDim { expected: usize, found: usize },

    #[error("point cloud has no {0} labels")]
    MissingLabels(&'static str),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("instance bank is empty but {0} instances were requested")]
    EmptyBank(usize),

    #[error("synthetic scene placement infeasible after {attempts} attempts")]
    InfeasiblePlacement { attempts: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
