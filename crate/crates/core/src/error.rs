use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected {expected} channels, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: data length {actual} does not match {expected}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no default dilation for kernel size {0}; supply d explicitly")]
    UnknownKernelSize(usize),

    #[error("spatial dims {h}x{w} are not divisible by {divisor}")]
    IndivisibleInput { h: usize, w: usize, divisor: usize },

    #[error("target ({h}, {w}) outside feature map {height}x{width}")]
    TargetOutOfBounds {
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },

    #[error("gradient requested for node {0} that was executed without recording")]
    NotRecorded(usize),

    #[error("degenerate ERF: all input gradients are zero")]
    DegenerateErf,

    #[error("empty input batch")]
    EmptyBatch,

    #[error("invalid probe input: {0}")]
    Probe(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
