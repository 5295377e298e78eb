// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("object quantity {quantity} outside 1..={max}")]
    QuantityOutOfRange { quantity: usize, max: usize },

    #[error("sequence violates task grammar: {0}")]
    Grammar(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("intervention sample filtered: {0}")]
    Filtered(&'static str),

    #[error("accuracy gate failed: {accuracy:.4} < {required:.4}")]
    Gate { accuracy: f64, required: f64 },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("insufficient samples: {0}")]
    Insufficient(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
