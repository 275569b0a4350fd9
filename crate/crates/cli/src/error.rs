use std::path::{Path, PathBuf};

use arepas_core::CoreError;

/// Failure of a CLI stage. Each variant maps to a stable code printed on exit.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Manifest(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("{0} already exists (pass --overwrite to replace)")]
    Exists(PathBuf),
    #[error("{0}")]
    Device(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Report(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Config(_) => "E_CONFIG",
            CliError::Manifest(_) => "E_MANIFEST",
            CliError::Prerequisite(_) => "E_PREREQ",
            CliError::Exists(_) => "E_EXISTS",
            CliError::Device(_) => "E_DEVICE",
            CliError::Io { .. } => "E_IO",
            CliError::Report(_) => "E_REPORT",
            CliError::Core(e) => match e {
                CoreError::Config(_) => "E_CONFIG",
                CoreError::Manifest(_) => "E_MANIFEST",
                CoreError::Exists(_) => "E_EXISTS",
                CoreError::Io { .. } | CoreError::Decode { .. } => "E_IO",
                CoreError::Checkpoint(_) => "E_CHECKPOINT",
                CoreError::NonFiniteLoss { .. } => "E_TRAIN",
                _ => "E_DATA",
            },
        }
    }

    /// `error[CODE]: message` on a single line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code(), self.to_string().replace(['\n', '\r'], " "))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
