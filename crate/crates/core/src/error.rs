// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use alloc::string::String;

/// Errors produced by the numeric kernel, the model and the analyses built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Human readable description of the offending shapes.
        detail: String,
    },
    /// An argument violated a documented precondition.
    #[error("invalid argument `{name}`: {detail}")]
    InvalidArgument {
        /// Argument or configuration key at fault.
        name: &'static str,
        /// What was wrong with it.
        detail: String,
    },
    /// A token id was outside the vocabulary.
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken {
        /// Offending id.
        id: usize,
        /// Vocabulary size.
        vocab: usize,
    },
    /// The sequence would not fit in the positional table.
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceOverflow {
        /// Requested length.
        len: usize,
        /// Configured maximum.
        max: usize,
    },
    /// A hook returned an edit whose shape does not match its site.
    #[error("hook edit at {point} is malformed: {detail}")]
    BadEdit {
        /// Hook point rendered as text.
        point: String,
        /// Description of the problem.
        detail: String,
    },
    /// A loss or activation became NaN or infinite.
    #[error("non-finite loss {value} at sample {sample}")]
    NonFinite {
        /// Index of the offending sample in its batch.
        sample: usize,
        /// The offending value.
        value: f64,
    },
    /// A patch was paired with a trace from a different input.
    #[error("patch source does not belong to this sample: {0}")]
    ForeignTrace(String),
    /// Random placement could not satisfy its constraints.
    #[error("infeasible placement: {0}")]
    Infeasible(String),
    /// A lookup into an aggregated table failed.
    #[error("missing entry: {0}")]
    Missing(String),
}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        detail: detail.into(),
    }
}
