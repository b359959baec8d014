use std::process::ExitCode;

/// Pipeline failures, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation, configuration or input schema (exit 2).
    #[error("{0}")]
    Usage(String),
    /// The analysis itself failed (exit 1).
    #[error("{context}: {source}")]
    Analysis {
        context: String,
        #[source]
        source: spindefect::Error,
    },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Analysis { .. } | CliError::Io(_) => ExitCode::from(1),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches pipeline context to an analysis error.
pub trait Context<T> {
    fn context(self, what: &str) -> CliResult<T>;
}

impl<T> Context<T> for spindefect::Result<T> {
    fn context(self, what: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Analysis {
            context: what.to_string(),
            source,
        })
    }
}
