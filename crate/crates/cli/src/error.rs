use thiserror::Error;

/// A command failure; the variant decides the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files.
    #[error("{0}")]
    Input(String),
    /// Data shapes or configuration incompatible with a checkpoint.
    #[error("{0}")]
    Mismatch(String),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Integrity(_) => 4,
        }
    }

    pub fn message(&self) -> String {
        self.to_string()
    }
}
