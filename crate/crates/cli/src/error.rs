use std::io;
use std::path::PathBuf;

use vecsketch_core::Error as CoreError;

pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const TRANSPORT: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } | CliError::Input { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig(_) => exit::USAGE,
                CoreError::Transport(_) | CoreError::Protocol { .. } | CoreError::Service(_) => exit::TRANSPORT,
                CoreError::Numeric(_) | CoreError::Domain(_) => exit::NUMERIC,
                CoreError::Io(_) => exit::IO,
                CoreError::Contract(_) => exit::INTERNAL,
            },
        }
    }
}
