use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A row that must be normalized has zero (or non-finite) norm.
    DegenerateRow { row: usize },
    /// Rows expected to be unit-norm are not.
    NotNormalized { row: usize, norm: f64 },
    /// NaN, infinity or an out-of-domain argument reached a numeric op.
    Numeric { op: &'static str, detail: String },
    /// Backward was called on a tensor with more than one element.
    NonScalarLoss { shape: Vec<usize> },
    /// Backward was called on a value that depends on no trainable leaf.
    DetachedGraph,
    /// A gradient contains a non-finite value.
    NonFiniteGradient { param: String },
    /// An index is outside the valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A configuration value violates its invariant.
    InvalidConfig(String),
    /// The input image is too small for the requested crop.
    ImageTooSmall {
        height: usize,
        width: usize,
        min_crop: usize,
    },
    /// The requested synthetic geometry cannot be realized.
    InfeasibleGeometry(String),
    /// Labels are required but missing.
    MissingLabels,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::DegenerateRow { row } => write!(f, "row {row} has zero norm"),
            Error::NotNormalized { row, norm } => {
                write!(f, "row {row} is not unit-norm (norm {norm})")
            }
            Error::Numeric { op, detail } => write!(f, "{op}: numeric error: {detail}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DetachedGraph => {
                write!(f, "loss does not depend on any tensor that requires grad")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ImageTooSmall {
                height,
                width,
                min_crop,
            } => write!(
                f,
                "image {height}x{width} is smaller than the minimum crop {min_crop}"
            ),
            Error::InfeasibleGeometry(msg) => write!(f, "infeasible geometry: {msg}"),
            Error::MissingLabels => write!(f, "labels are required but missing"),
        }
    }
}

impl core::error::Error for Error {}
