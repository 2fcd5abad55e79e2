use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::dataset::BlobError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// A configuration field failed parsing or validation.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{}: {source}", path.display())]
    Blob {
        path: PathBuf,
        #[source]
        source: BlobError,
    },
    /// Stored data does not match its manifest.
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] vtn_core::Error),
    #[error("gradient check failed for: {}", .0.join(", "))]
    Gradcheck(Vec<String>),
}

impl AppError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        AppError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use vtn_core::Error as E;
        match self {
            AppError::Config { .. } => exit::CONFIG,
            AppError::Io { .. } | AppError::Checkpoint { .. } | AppError::Blob { .. } | AppError::Corrupt { .. } => exit::IO,
            AppError::Gradcheck(_) => exit::NUMERIC,
            AppError::Core(e) => match e {
                E::NonFinite { .. } => exit::NUMERIC,
                E::Config(_) | E::Data(_) | E::ParamMismatch { .. } => exit::CONFIG,
                // shape and contract errors are internal faults; report them as numeric aborts
                E::Dimension { .. } | E::Contract(_) => exit::NUMERIC,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
