use std::fmt;

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or a missing input; exit code 2.
    Usage(String),
    /// Malformed configuration file; exit code 2.
    Config(String),
    /// Operational failure inside the toolkit; exit code 1.
    Core(semheat_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "bad_config",
            CliError::Core(e) => e.code(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Config(m) => write!(f, "invalid configuration file: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<semheat_core::Error> for CliError {
    fn from(e: semheat_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
