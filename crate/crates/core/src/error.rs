use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate calibration: every training distance is zero")]
    DegenerateCalibration,
    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("non-finite loss at epoch {epoch}, layer {layer}")]
    NonFinite { epoch: usize, layer: usize },
    #[error("model is not calibrated")]
    Uncalibrated,
    #[error("layer index {index} out of range for a {layers}-layer network")]
    LayerIndex { index: usize, layers: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
