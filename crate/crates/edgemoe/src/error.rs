//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Configuration failed validation; each string describes one violation.
    InvalidConfig(Vec<String>),
    /// A caller-supplied argument is out of range or inconsistent.
    InvalidArgument(String),
    /// File I/O failure with the path that caused it.
    Io { path: String, source: std::io::Error },
    /// A serialized artifact could not be parsed. `line` is 1-based and only
    /// set for line-oriented formats.
    Parse { path: String, line: Option<usize>, msg: String },
    /// An artifact was produced for a different model configuration.
    DigestMismatch { expected: String, found: String, what: &'static str },
    /// An artifact was written by an incompatible serialization version.
    VersionMismatch { expected: u32, found: u32, what: &'static str },
    /// Requested a quantizing operation at a non-integer bitwidth.
    NotQuantizable(crate::topology::Bitwidth),
    /// Weight data contained NaN or infinity.
    NonFiniteWeight,
    /// Trace generation cannot satisfy its structural constraints.
    InfeasibleGeneration(String),
    /// A byte budget is too small to run the requested simulation.
    BudgetInfeasible { budget_bytes: u64, required_bytes: u64 },
    /// Every buffer resident is pinned and none can be evicted.
    EvictionDeadlock,
    /// An insert larger than the whole buffer capacity.
    InsufficientCapacity { size_bytes: u64, capacity_bytes: u64 },
}

impl Error {
    /// True for errors that describe an infeasible problem domain rather than
    /// malformed input. The CLI maps these to a distinct exit code.
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleGeneration(_)
                | Error::BudgetInfeasible { .. }
                | Error::EvictionDeadlock
                | Error::InsufficientCapacity { .. }
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(violations) => {
                write!(f, "invalid model config: {}", violations.join("; "))
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::Parse { path, line: Some(line), msg } => {
                write!(f, "{path}:{line}: {msg}")
            }
            Error::Parse { path, line: None, msg } => write!(f, "{path}: {msg}"),
            Error::DigestMismatch { expected, found, what } => write!(
                f,
                "{what} was built for a different config (digest {found}, expected {expected})"
            ),
            Error::VersionMismatch { expected, found, what } => {
                write!(f, "{what} has format version {found}, expected {expected}")
            }
            Error::NotQuantizable(b) => {
                write!(f, "{b} is not a quantizing bitwidth (use int2/int4/int8)")
            }
            Error::NonFiniteWeight => write!(f, "weights contain NaN or infinity"),
            Error::InfeasibleGeneration(msg) => write!(f, "trace generation infeasible: {msg}"),
            Error::BudgetInfeasible { budget_bytes, required_bytes } => write!(
                f,
                "memory budget of {budget_bytes} bytes is below the {required_bytes} bytes \
                 needed for resident weights plus one working set of experts"
            ),
            Error::EvictionDeadlock => {
                write!(f, "cannot make room in expert buffer: all residents are pinned")
            }
            Error::InsufficientCapacity { size_bytes, capacity_bytes } => write!(
                f,
                "expert of {size_bytes} bytes cannot fit a buffer of {capacity_bytes} bytes"
            ),
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
