use thiserror::Error;

/// Errors raised across the calibration toolkit.
///
/// The split between [`CalibError::InvalidInput`] and [`CalibError::Numerical`]
/// drives the CLI exit code (1 and 2 respectively).
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CalibError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CalibError::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        CalibError::Numerical(msg.into())
    }

    /// Prefixes the message with a pipeline stage label, keeping the error class.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            CalibError::Numerical(m) => CalibError::Numerical(format!("{stage}: {m}")),
            CalibError::InvalidInput(m) => CalibError::InvalidInput(format!("{stage}: {m}")),
            other => CalibError::InvalidInput(format!("{stage}: {other}")),
        }
    }

    /// True for errors caused by bad user input rather than a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        !matches!(self, CalibError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;
