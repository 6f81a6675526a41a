use std::fmt;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A referenced item (level, image, category) does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Invalid configuration detected at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary container.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Payload shorter than the header promises.
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("version error: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// JSON document does not follow the expected schema.
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },

    /// Structurally valid input with invalid contents.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension(_) => ErrorKind::Dimension,
            Error::Contract(_) => ErrorKind::Contract,
            Error::Lookup(_) => ErrorKind::Lookup,
            Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } => ErrorKind::Format,
            Error::Truncated { .. } => ErrorKind::Truncated,
            Error::UnsupportedDtype(_) => ErrorKind::UnsupportedDtype,
            Error::Version { .. } => ErrorKind::Version,
            Error::Schema { .. } => ErrorKind::Schema,
            Error::Validation(_) => ErrorKind::Validation,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    Dimension,
    Contract,
    Lookup,
    Config,
    Format,
    Truncated,
    UnsupportedDtype,
    Version,
    Schema,
    Validation,
    Io,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Dimension => "dimension",
            ErrorKind::Contract => "contract",
            ErrorKind::Lookup => "lookup",
            ErrorKind::Config => "config",
            ErrorKind::Format => "format",
            ErrorKind::Truncated => "truncated",
            ErrorKind::UnsupportedDtype => "unsupported-dtype",
            ErrorKind::Version => "version",
            ErrorKind::Schema => "schema",
            ErrorKind::Validation => "validation",
            ErrorKind::Io => "io",
        };
        f.write_str(s)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
