use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("compute error in {module}: {message}")]
    Compute { module: &'static str, message: String },
}

impl CliError {
    pub fn compute(module: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Compute { module, message: e.to_string() }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Compute { .. } => ExitCode::from(3),
        }
    }
}
