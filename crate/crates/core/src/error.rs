//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    // container
    #[error("malformed container header: {0}")]
    MalformedHeader(String),
    #[error("record `{record}`: truncated payload ({detail})")]
    Truncated { record: String, detail: String },
    #[error("duplicate record name `{0}`")]
    DuplicateName(String),
    #[error("record `{record}`: unknown dtype code {code}")]
    UnknownDType { record: String, code: u8 },
    #[error("record `{record}`: {detail}")]
    InvalidRecord { record: String, detail: String },
    #[error("invalid ternary code 0b11 at index {index}")]
    InvalidTernaryCode { index: usize },
    #[error("non-zero padding bits in packed ternary data")]
    NonZeroTernaryPadding,

    // manifest / graph
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("layer `{layer}` references missing tensor `{tensor}`")]
    DanglingTensor { layer: String, tensor: String },
    #[error("layer `{layer}` reads `{input}`, which no preceding layer produces")]
    DanglingInput { layer: String, input: String },
    #[error("layer `{layer}`: shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("graph: {0}")]
    InvalidGraph(String),

    // quantization
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("filters in a cluster must have equal length (expected {expected}, got {got})")]
    FilterSizeMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    // engine
    #[error("layer `{layer}`: no activation format; run calibration first")]
    MissingFormat { layer: String },
    #[error("layer `{layer}`: {detail}")]
    ModeIncompatible { layer: String, detail: String },
    #[error("layer `{layer}`: i32 accumulator overflow")]
    AccumulatorOverflow { layer: String },

    // training
    #[error("non-finite loss (first non-finite activation in layer `{layer}`)")]
    NanLoss { layer: String },
    #[error("training diverged at epoch {epoch}: mean loss {loss} exceeds 10x initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
}
