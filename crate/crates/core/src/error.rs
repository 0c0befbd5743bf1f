use alloc::string::String;
use core::fmt;

/// Errors raised by the detection core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors or images that must agree in shape do not.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    /// An argument violates an operation's precondition.
    InvalidArgument(String),
    /// Input image too small for the stride-32 stage.
    InputTooSmall { height: usize, width: usize },
    /// A named parameter is missing from the store.
    MissingParameter(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected shape {expected}, found {found}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InputTooSmall { height, width } => {
                write!(f, "input {height}x{width} is smaller than the 32x32 minimum")
            }
            Error::MissingParameter(name) => write!(f, "missing parameter `{name}`"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(context: &'static str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch {
        context,
        expected: alloc::format!("{expected:?}"),
        found: alloc::format!("{found:?}"),
    }
}
