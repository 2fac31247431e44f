use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported format version {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training collapsed: {0}")]
    Collapsed(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
