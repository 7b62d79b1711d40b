use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),

    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] adaprompt_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
