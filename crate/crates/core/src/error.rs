use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the flowik core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid robot specification at joint `{joint}`: {reason}")]
    RobotSpec { joint: String, reason: String },

    #[error("end-effector index {index} out of range ({count} end effectors)")]
    EndEffectorIndex { index: usize, count: usize },

    #[error(transparent)]
    Ode(#[from] crate::odeint::OdeError),

    #[error("non-finite log-density for sample {sample}: {source}")]
    NonFiniteSample {
        sample: usize,
        #[source]
        source: crate::odeint::OdeError,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("robot signature mismatch: checkpoint is for {checkpoint}, robot is {robot}")]
    Signature { checkpoint: String, robot: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed CSV at row {row}: {reason}")]
    Csv { row: usize, reason: String },

    #[error("training aborted after {skips} consecutive skipped steps at iteration {iteration}: {reason}")]
    TrainingAborted {
        iteration: usize,
        skips: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
