use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward requires a 1x1x1x1 loss, got {0}")]
    NonScalarLoss(String),

    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("input extent {h}x{w} is not divisible by {divisor}; pad to {pad_h}x{pad_w}")]
    Indivisible {
        h: usize,
        w: usize,
        divisor: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    Missing(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("mask {path} contains label {value} outside 0..{classes}")]
    MaskLabel {
        path: PathBuf,
        value: u8,
        classes: usize,
    },

    #[error("extent mismatch: image {image:?} vs mask {mask:?}")]
    ExtentMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
