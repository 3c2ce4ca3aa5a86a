use std::path::Path;

use kdbench_core::Error as CoreError;

/// Exit status for configuration problems (bad JSON, unknown names, failed validation, missing inputs).
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures during compute or while writing outputs.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    /// Failure writing `path`.
    pub fn write(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidMapping(_)
            | CoreError::InvalidSpec(_)
            | CoreError::InvalidTrainConfig(_)
            | CoreError::ArchitectureMismatch(_)
            | CoreError::CorpusTooSmall { .. }
            | CoreError::TokenOutOfRange { .. }
            | CoreError::SequenceTooLong { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
