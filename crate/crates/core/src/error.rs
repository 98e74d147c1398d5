use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty mask: no valid elements to average over")]
    EmptyMask,
    #[error("data error: {0}")]
    Data(String),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    Hash {
        what: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Hash { .. } => 3,
            Error::Dimension(_) | Error::Contract(_) | Error::EmptyMask => 4,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
