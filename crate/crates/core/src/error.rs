use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid step {t}: expected a value in [{min}, {max}]")]
    InvalidStep { t: usize, min: usize, max: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A pluggable handle produced something the caller cannot use
    /// (wrong number of classes, wrong tensor shape, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("supervision unavailable: {0}")]
    SupervisionUnavailable(String),

    #[error("validation unavailable: {0}")]
    ValidationUnavailable(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidStep { .. } => "invalid-step",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Configuration(_) => "configuration",
            Error::EmptyBatch(_) => "empty-batch",
            Error::Sequencing(_) => "sequencing",
            Error::Divergence { .. } => "divergence",
            Error::SupervisionUnavailable(_) => "supervision-unavailable",
            Error::ValidationUnavailable(_) => "validation-unavailable",
            Error::Client(_) => "client",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
