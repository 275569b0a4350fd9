use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("no foreground: mask is empty")]
    NoForeground,
    #[error("degenerate histogram: region has fewer than two distinct intensities")]
    DegenerateHistogram,
    #[error("all-zero input")]
    AllZero,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image side {0} must be divisible by 4")]
    NotDivisibleBy4(usize),
    #[error("patch size {patch} exceeds image side {side}")]
    PatchTooLarge { patch: usize, side: usize },
    #[error("non-finite loss at {stage} step {step} (batch {batch})")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        batch: String,
    },
    #[error("{0}: already exists")]
    Exists(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("region sampling failed after {0} attempts")]
    SamplingFailed(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
}

impl From<arepas_nn::NnError> for CoreError {
    fn from(e: arepas_nn::NnError) -> Self {
        CoreError::Checkpoint(e.to_string())
    }
}
