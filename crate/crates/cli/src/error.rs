use std::fmt;

use vizecg_core::data::DataError;
use vizecg_core::model::ModelError;
use vizecg_core::raster::RasterError;
use vizecg_core::train::TrainError;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or combinations (exit 1).
    Usage(String),
    /// Unreadable, malformed or mismatched files (exit 2).
    Data(String),
    /// Non-finite values or failed gradient checks (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::ContradictoryLabels(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Layout(_) | RasterError::TooSmall { .. } => CliError::Usage(e.to_string()),
            RasterError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Raster(r) => r.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(_) | TrainError::EmptySplit => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
