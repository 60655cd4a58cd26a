use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped so the CLI can map them onto stable exit codes:
/// config/schema problems, numeric failures and violated preconditions
/// each get their own code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config/schema, 3 numeric, 4 precondition.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Schema { .. } | Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Precondition(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
