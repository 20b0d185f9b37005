use std::io;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("cannot broadcast {rhs:?} against {lhs:?}")]
    Broadcast { lhs: Shape4, rhs: Shape4 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Shape4, actual: Shape4 },

    #[error("channel mismatch: expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("output extent is not integral: input {input}, window {window}, stride {stride}, padding {padding}")]
    NonIntegralExtent {
        input: usize,
        window: usize,
        stride: usize,
        padding: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward called without a matching forward pass ({0})")]
    MissingContext(&'static str),

    #[error("batch normalization needs at least two values per channel in training mode")]
    DegenerateBatch,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("image format: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
