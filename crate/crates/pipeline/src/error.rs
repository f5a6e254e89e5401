use std::path::PathBuf;

use thiserror::Error;

use crate::cache::CacheError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] baret_core::Error),
    #[error("{path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: CacheError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const NUMERIC: i32 = 1;
    pub const BAD_INPUT: i32 = 2;
    pub const CONFIG: i32 = 3;
}

impl PipelineError {
    pub fn cache(path: impl Into<PathBuf>, source: CacheError) -> Self {
        PipelineError::Cache {
            path: path.into(),
            source,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use baret_core::Error as E;
        match self {
            PipelineError::Core(E::Numeric { .. } | E::Training { .. }) => exit::NUMERIC,
            PipelineError::Core(_) | PipelineError::Config(_) | PipelineError::Unsupported(_) => {
                exit::CONFIG
            }
            PipelineError::Cache { .. } | PipelineError::Io { .. } | PipelineError::Image { .. } => {
                exit::BAD_INPUT
            }
        }
    }
}
