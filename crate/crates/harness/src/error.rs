use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes. These are part of the CLI contract.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const VERIFICATION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] avcil_core::Error),

    #[error("seed {seed}: {source}\nlast run-log lines:\n{}", tail.join("\n"))]
    Diverged {
        seed: u64,
        source: avcil_core::Error,
        tail: Vec<String>,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use avcil_core::Error as E;
        match self {
            HarnessError::Diverged { .. } => exit::DIVERGED,
            HarnessError::Core(E::Diverged { .. } | E::Numeric(_)) => exit::DIVERGED,
            HarnessError::Verification(_) => exit::VERIFICATION,
            _ => exit::CONFIG,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
        move |source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}
