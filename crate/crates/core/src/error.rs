use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("invalid QP problem: {0}")]
    InvalidProblem(String),

    #[error("invalid controller config: {0}")]
    InvalidController(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("diffusion step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial loss {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid metrics input: {0}")]
    Metrics(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed TOML in {path}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|source| Error::Toml {
        path: path.to_path_buf(),
        source,
    })
}
