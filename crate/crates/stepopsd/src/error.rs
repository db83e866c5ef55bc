use std::path::PathBuf;

/// Process exit codes by failure category.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const PARSE: u8 = 5;
    pub const VERIFICATION: u8 = 6;
    pub const NUMERICAL: u8 = 7;
    pub const INTERNAL: u8 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: u64,
        message: String,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] stepopsd_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use stepopsd_core::Error as C;
        match self {
            Error::Io { .. } => exit::IO,
            Error::Parse { .. } | Error::Invalid { .. } | Error::Snapshot(_) => exit::PARSE,
            Error::Config(_) | Error::Core(C::Config(_)) => exit::CONFIG,
            Error::Verification(_) => exit::VERIFICATION,
            Error::Core(C::NonFinite(_)) => exit::NUMERICAL,
            Error::Core(C::Range { .. } | C::UnbalancedTag { .. } | C::NestedTag { .. } | C::UnknownToken(_)) => {
                exit::PARSE
            }
            Error::Core(C::Consistency(_)) => exit::INTERNAL,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
