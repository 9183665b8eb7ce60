use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial loss {initial} for {window} consecutive steps")]
    Divergence {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidRange(_) | Error::Geometry(_) => 2,
            Error::Prerequisite(_) | Error::MissingParam(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
