use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not satisfy an op's contract. Carries both shapes.
    Shape(String),
    /// Invalid model or training configuration.
    Config(String),
    /// Malformed or inconsistent pose data (file loading, clip validation).
    Data(String),
    /// Checkpoint container problems: bad magic, truncation, shape table mismatch.
    Checkpoint(String),
    /// Procrustes alignment hit a degenerate point configuration.
    Degenerate(String),
    /// A value that must be finite was not (loss, gradient, loaded data).
    NonFinite(String),
    /// A function handed to the finite-difference oracle returned different
    /// values for identical inputs.
    Nondeterministic(String),
    /// Underlying I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Data(msg) => write!(f, "bad pose data: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate geometry: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Nondeterministic(msg) => write!(f, "non-deterministic function: {msg}"),
            Error::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
