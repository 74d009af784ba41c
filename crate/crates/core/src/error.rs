//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("no legal broadcast between shapes {left:?} and {right:?}")]
    InvalidBroadcast { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid tensor: data length {len} does not match shape {shape:?}")]
    InvalidTensor { shape: Vec<usize>, len: usize },

    #[error("{kernel}x{kernel} kernel exceeds padded input {padded_h}x{padded_w}")]
    KernelTooLarge {
        kernel: usize,
        padded_h: usize,
        padded_w: usize,
    },

    #[error("stride must be >= 1")]
    ZeroStride,

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },

    #[error("coordinate index {index} out of range for extent {extent}")]
    CoordIndexOutOfRange { index: usize, extent: usize },

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("ground-truth box extent must be positive, got {width}x{height}")]
    NonPositiveExtent { width: f64, height: f64 },

    #[error("evaluation requires at least one ground-truth box")]
    NoGroundTruth,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("coordinate grid {h}x{w} has fewer than 4 cells")]
    GridTooSmall { h: usize, w: usize },

    #[error("placed only {placed} of {requested} objects after {attempts} attempts")]
    PlacementFailed {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("affine transform is singular (det = {det:e})")]
    SingularTransform { det: f64 },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("layer {layer}: expected {expected} input channels, got {got}")]
    LayerMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("{path}: {kind} at byte {offset}")]
    Format {
        path: String,
        kind: String,
        offset: u64,
    },

    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, kind: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            path: path.into(),
            kind: kind.into(),
            offset,
        }
    }
}
