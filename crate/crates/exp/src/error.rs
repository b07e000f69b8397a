use std::io;

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error(transparent)]
    Core(#[from] dropens::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("missing model checkpoint {0}; run the scaling experiment first")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, ExpError>;
