use std::path::PathBuf;

use thiserror::Error;
use trace_core::CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: run `{stage}` first ({detail})")]
    MissingStage { stage: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(CoreError),
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(msg) => CliError::Config(msg),
            CoreError::MissingStage { stage, detail } => CliError::MissingStage { stage, detail },
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn missing(stage: &str, detail: impl Into<String>) -> Self {
        CliError::MissingStage {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for a missing prerequisite stage, 3 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingStage { .. } => 2,
            CliError::Config(_) => 3,
            _ => 1,
        }
    }
}
