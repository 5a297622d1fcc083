//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by tensor kernels, graph execution, file I/O and training.
#[derive(Debug)]
pub enum Error {
    /// Two tensors were expected to have the same shape (or precision) and did not.
    ShapeMismatch { context: String, lhs: String, rhs: String },
    /// A shape or layer specification is invalid (e.g. output size < 1).
    InvalidSpec(String),
    /// The architecture description failed validation.
    ArchError(String),
    /// A named graph input was not supplied to `forward`.
    MissingInput(String),
    /// Graph construction or execution was handed an out-of-range node id.
    InvalidNode(String),
    /// `backward` was asked to start from a non-scalar node.
    NonScalarLoss { shape: String },
    /// A label value is outside `0..num_classes` and is not the void label.
    LabelOutOfRange { value: u16, num_classes: usize, context: String },
    /// An I/O failure, tagged with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// A file had the wrong magic, a malformed header, or truncated contents.
    Format { path: PathBuf, detail: String },
    /// The training loss became non-finite.
    Diverged { epoch: usize, step: usize, loss: f64 },
    /// Generic invalid-argument error for CLI-facing surfaces.
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, lhs, rhs } => {
                write!(f, "shape mismatch in {context}: {lhs} vs {rhs}")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid layer spec: {msg}"),
            Error::ArchError(msg) => write!(f, "architecture error: {msg}"),
            Error::MissingInput(name) => write!(f, "missing graph input '{name}'"),
            Error::InvalidNode(msg) => write!(f, "invalid node reference: {msg}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss node, got shape {shape}")
            }
            Error::LabelOutOfRange { value, num_classes, context } => {
                write!(f, "label {value} out of range (classes: {num_classes}) at {context}")
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format { path, detail } => {
                write!(f, "bad file format in {}: {detail}", path.display())
            }
            Error::Diverged { epoch, step, loss } => {
                write!(f, "training diverged at epoch {epoch}, step {step}: loss = {loss}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
