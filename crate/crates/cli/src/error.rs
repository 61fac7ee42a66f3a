use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration, or checkpoint/config mismatch.
    #[error("{0}")]
    Usage(String),
    /// Missing or malformed input files.
    #[error("{0}")]
    Data(String),
    /// NaN or infinity during computation.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<glasstereo::Error> for CliError {
    fn from(e: glasstereo::Error) -> Self {
        use glasstereo::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite { .. } | E::NaNInput(_) => CliError::Numeric(msg),
            E::Config(_) | E::Checkpoint(_) | E::Dimension(_) | E::Shape(_) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
