use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Config file problem tied to a source line.
    #[error("config error at line {line}: {key}: {message}")]
    ConfigLine {
        line: usize,
        key: String,
        message: String,
    },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("gradient inversion aborted: {0}")]
    Inversion(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
