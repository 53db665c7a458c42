use std::path::PathBuf;

/// Errors produced by the tracker library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("grid index ({i}, {j}) outside {w}x{h} grid")]
    GridIndex { i: usize, j: usize, w: usize, h: usize },

    #[error("point ({x}, {y}) is not strictly inside box {bbox}")]
    PointOutsideBox { x: f64, y: f64, bbox: String },

    #[error("non-positive side distance: {0:?}")]
    NonPositiveDistance([f64; 4]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no positive cells in label map")]
    NoPositives,

    #[error("empty sample selection")]
    EmptySelection,

    #[error("level {0} is not emitted by the backbone")]
    UnknownLevel(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence error in {path}: {msg}")]
    Sequence { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("tracker has not been initialized")]
    Uninitialized,

    #[error("length mismatch: {0} predictions vs {1} ground-truth boxes")]
    LengthMismatch(usize, usize),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
