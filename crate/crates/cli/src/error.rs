use cedual::Error;

/// Failures of a subcommand, each tied to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{skipped} of {total} input lines were skipped")]
    SkippedInputs { skipped: usize, total: usize },

    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::SkippedInputs { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                Error::Config(_)
                | Error::Io { .. }
                | Error::Format { .. }
                | Error::UnknownEmotion { .. }
                | Error::Checkpoint(_)
                | Error::MissingVariant(_)
                | Error::Contract(_) => EXIT_USAGE,
                _ => EXIT_INTERNAL,
            },
        }
    }
}
