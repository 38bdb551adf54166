use std::fmt;
use std::path::Path;

use g3dk_core::config::ConfigError;
use g3dk_core::model::{ModelError, PrepareError, TrainError};
use g3dk_core::synthscene::{DatasetError, SceneError};

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an invalid config file.
    Usage(String),
    /// Unreadable or unwritable files, malformed datasets and checkpoints.
    Io(String),
    /// Non-finite losses and failed gradient checks.
    Numeric(String),
    /// Checkpoint, config and data disagree.
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::Mismatch(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Usage(format!("scene generation: {e}"))
    }
}

impl From<PrepareError> for CliError {
    fn from(e: PrepareError) -> Self {
        CliError::Mismatch(format!("dataset does not fit the config: {e}"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            ModelError::Mismatch(_) | ModelError::Config(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model { source, .. } => source.into(),
            TrainError::Empty => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}
