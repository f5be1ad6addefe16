use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Each variant has a stable machine-readable code (see [`Error::code`]) that
/// the command-line front end forwards to its callers.
#[derive(Debug)]
pub enum Error {
    GeometryMismatch(String),
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    EmptyDataset,
    InvalidStep(usize),
    ShapeMismatch(String),
    UnsupportedSpan { filter: usize, dilation: usize },
    EmptyBatch,
    InvalidProbability(f64),
    NoForwardPass,
    InvalidConfig(String),
    LengthMismatch { left: usize, right: usize },
    NonFiniteGradient,
    DivergedLoss { epoch: usize },
    InvalidRange(String),
    EmptySpace,
    TooFewDistinctValues { distinct: usize, k: usize },
    EmptyInput,
    DegenerateGroups(String),
    InvalidDegreesOfFreedom { d1: usize, d2: usize },
    ZeroVariance,
    InvalidSpec(String),
    ChecksumMismatch { expected: String, found: String },
    Parse(String),
    Io(std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::GeometryMismatch(_) => "GEOMETRY_MISMATCH",
            Error::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::InvalidStep(_) => "INVALID_STEP",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::UnsupportedSpan { .. } => "UNSUPPORTED_SPAN",
            Error::EmptyBatch => "EMPTY_BATCH",
            Error::InvalidProbability(_) => "INVALID_PROBABILITY",
            Error::NoForwardPass => "NO_FORWARD_PASS",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::LengthMismatch { .. } => "LENGTH_MISMATCH",
            Error::NonFiniteGradient => "NON_FINITE_GRADIENT",
            Error::DivergedLoss { .. } => "DIVERGED_LOSS",
            Error::InvalidRange(_) => "INVALID_RANGE",
            Error::EmptySpace => "EMPTY_SPACE",
            Error::TooFewDistinctValues { .. } => "TOO_FEW_DISTINCT_VALUES",
            Error::EmptyInput => "EMPTY_INPUT",
            Error::DegenerateGroups(_) => "DEGENERATE_GROUPS",
            Error::InvalidDegreesOfFreedom { .. } => "INVALID_DEGREES_OF_FREEDOM",
            Error::ZeroVariance => "ZERO_VARIANCE",
            Error::InvalidSpec(_) => "INVALID_SPEC",
            Error::ChecksumMismatch { .. } => "CHECKSUM_MISMATCH",
            Error::Parse(_) => "PARSE_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::GeometryMismatch(what) => write!(f, "raster geometry mismatch: {what}"),
            Error::IndexOutOfRange { row, col, rows, cols } => {
                write!(f, "pixel ({row}, {col}) outside {rows}x{cols} raster")
            }
            Error::EmptyDataset => write!(f, "no eligible samples"),
            Error::InvalidStep(s) => write!(f, "ring rotation step {s} outside 1..=7"),
            Error::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            Error::UnsupportedSpan { filter, dilation } => write!(
                f,
                "filter {filter} with dilation {dilation} has an odd padding span"
            ),
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::InvalidProbability(p) => write!(f, "dropout probability {p} not in [0, 1)"),
            Error::NoForwardPass => write!(f, "backward called without a recorded forward pass"),
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::NonFiniteGradient => write!(f, "non-finite gradient"),
            Error::DivergedLoss { epoch } => write!(f, "loss became non-finite at epoch {epoch}"),
            Error::InvalidRange(what) => write!(f, "invalid range: {what}"),
            Error::EmptySpace => write!(f, "empty hyperparameter search space"),
            Error::TooFewDistinctValues { distinct, k } => write!(
                f,
                "{distinct} distinct values cannot form {k} clusters"
            ),
            Error::EmptyInput => write!(f, "empty input"),
            Error::DegenerateGroups(what) => write!(f, "degenerate groups: {what}"),
            Error::InvalidDegreesOfFreedom { d1, d2 } => {
                write!(f, "invalid degrees of freedom ({d1}, {d2})")
            }
            Error::ZeroVariance => write!(f, "zero variance"),
            Error::InvalidSpec(what) => write!(f, "invalid field spec: {what}"),
            Error::ChecksumMismatch { expected, found } => {
                write!(f, "config hash mismatch: expected {expected}, found {found}")
            }
            Error::Parse(what) => write!(f, "parse error: {what}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
