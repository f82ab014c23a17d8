// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Workbench failures, split by exit code: bad input exits 1, anything that
/// goes wrong while running exits 2.
#[derive(Debug, thiserror::Error)]
pub enum WbError {
    #[error("invalid {key}: {detail}")]
    Validation { key: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] crosstrace_core::Error),
}

pub type WbResult<T> = std::result::Result<T, WbError>;

impl WbError {
    pub fn validation(key: impl Into<String>, detail: impl Into<String>) -> Self {
        WbError::Validation {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> Self {
        WbError::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            WbError::Validation { .. } => 1,
            WbError::Core(crosstrace_core::Error::InvalidArgument { .. }) => 1,
            _ => 2,
        }
    }
}

/// Attaches a path to an IO error.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> WbResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> WbResult<T> {
        self.map_err(|source| WbError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
