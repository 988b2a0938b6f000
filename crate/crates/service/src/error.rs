// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] fluxqa_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl ServiceError {
    /// Process exit status: 2 for numerical failures, 1 for anything the
    /// caller can fix by changing the input.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        ServiceError::Invalid(msg.into())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| ServiceError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ServiceError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| ServiceError::Io { path: path.to_path_buf(), source })
}
