use thiserror::Error;

/// Error taxonomy shared by the whole crate. Variants map 1:1 onto CLI exit
/// codes, so every fallible public operation picks the category deliberately.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration (bad key, bad value, bad combination).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing files, malformed manifests, undecodable videos,
    /// records that cannot satisfy a sampling request.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint incompatible with the requested run (wrong architecture,
    /// missing parameters, digest mismatch, corrupt payload).
    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),

    /// Tensor shape disagreement detected at an operation boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or numerically invalid inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem failures outside of dataset loading.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Incompatible(_) => 4,
            Error::Shape(_) | Error::Numeric(_) | Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand constructors; most call sites format a message inline.
impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn incompatible(msg: impl Into<String>) -> Self {
        Error::Incompatible(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
