use std::path::PathBuf;

use thiserror::Error;

/// Harness errors, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("filter failed at step {step}: {source}")]
    FilterFatal {
        step: usize,
        #[source]
        source: ipf_core::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
        let path = path.into();
        move |source| BenchError::Io { path, source }
    }

    /// 2 = config, 3 = filter-fatal, 4 = i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::FilterFatal { .. } => 3,
            BenchError::Io { .. } => 4,
        }
    }
}

impl From<ipf_core::Error> for BenchError {
    fn from(e: ipf_core::Error) -> Self {
        BenchError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
