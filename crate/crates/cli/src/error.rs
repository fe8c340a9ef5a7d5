use rfa_core::RfaError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Failure while running an experiment; exit code 2.
    #[error(transparent)]
    Runtime(#[from] RfaError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(RfaError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
