use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("runs cannot be compared: {0}")]
    Incompatible(String),

    #[error("{phase} failed: {source}")]
    Numerical {
        phase: &'static str,
        #[source]
        source: rvi_core::Error,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    /// 0 success, 1 numerical or i/o failure, 2 bad configuration or input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Incompatible(_) => 2,
            CliError::Numerical { .. } | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
