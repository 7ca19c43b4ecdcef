use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule construction failed: {0}")]
    ScheduleConstruction(String),

    /// A computation produced a non-finite value. `step` is the iteration,
    /// chain step or sample index where it was first observed, when known.
    #[error("numerical failure{}: {what}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NumericalFailure { step: Option<usize>, what: String },

    #[error("time {t} is too close to zero (1 - alpha = {one_minus_alpha:e})")]
    NearSingularTime { t: f64, one_minus_alpha: f64 },

    #[error("size error: {0}")]
    Size(String),

    #[error("magnitude undefined: weighting system is singular after jitter")]
    MagnitudeUndefined,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerical(step: Option<usize>, what: impl Into<String>) -> Self {
        Error::NumericalFailure {
            step,
            what: what.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalFailure { .. }
            | Error::Diverged { .. }
            | Error::MagnitudeUndefined
            | Error::NearSingularTime { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}
