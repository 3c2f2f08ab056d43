use numkit::NumError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    /// A prerequisite artifact from an earlier pipeline stage is absent.
    #[error("missing prerequisite from stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn missing(stage: &str, detail: impl Into<String>) -> Self {
        CoreError::MissingStage {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }
}
