//! Error taxonomy shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up. Reports both shapes and the operation.
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A submodel configuration or backbone description violates its bounds.
    /// The message names the offending axis (and layer where applicable).
    Config(String),
    /// Malformed or empty input data.
    Input(String),
    /// The evolutionary search cannot proceed (e.g. nothing to select from).
    Search(String),
    /// Training produced a non-finite loss; carries the step and diagnostics.
    NonFinite { step: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} vs {rhs:?}")
            }
            Error::Config(msg) => write!(f, "configuration: {msg}"),
            Error::Input(msg) => write!(f, "input: {msg}"),
            Error::Search(msg) => write!(f, "search: {msg}"),
            Error::NonFinite { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
