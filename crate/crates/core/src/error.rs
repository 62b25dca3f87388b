use std::path::PathBuf;

use thiserror::Error;

use crate::domain::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label undefined at {at}: record {id} was logged at {log_time}")]
    LabelBeforeLog { id: u64, log_time: Timestamp, at: Timestamp },

    #[error("invalid task schedule: {0}")]
    Schedule(String),

    #[error("invalid generator config: {0}")]
    Generator(String),

    #[error("invalid record {id}: {reason}")]
    Record { id: u64, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("time regression in {pipeline}: {tau} < previous {previous}")]
    TimeRegression {
        pipeline: String,
        tau: Timestamp,
        previous: Timestamp,
    },

    #[error("duplicate extended-log capture for record {0}")]
    DuplicateCapture(u64),

    #[error("extended log: {0}")]
    ExtLog(String),

    #[error("invalid simulation config: {0}")]
    SimConfig(String),

    #[error("invalid learner spec: {0}")]
    LearnerSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
