use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    Numeric(String),
    #[error("input too small: {height}x{width} is below the {block}-pixel downsampling block")]
    InputTooSmall { height: usize, width: usize, block: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("corrupt bitstream: {0}")]
    Corrupt(String),
    #[error("curve fit failed: {0}")]
    Fit(String),
    #[error("training aborted at epoch {epoch}: {part} became non-finite")]
    TrainingAborted { epoch: usize, part: String },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("failed on {item}: {source}")]
    Partial { item: String, source: Box<Error> },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::InputTooSmall { .. } => "input_too_small",
            Error::Parameter(_) => "parameter",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Precondition(_) => "precondition",
            Error::Corrupt(_) => "corrupt",
            Error::Fit(_) => "fit",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Manifest { .. } => "manifest",
            Error::Partial { .. } => "partial",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
