use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("inconsistent layout: {0}")]
    InconsistentLayout(String),
    #[error("flood fill leaked through the boundary at row {row}, column {col}")]
    FloodLeak { row: usize, col: usize },
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("mask is not binary (value {0} found)")]
    NonBinaryMask(f32),
    #[error("no style for plane id {0}")]
    MissingStyle(u8),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("could not draw a valid polygon mask after {0} attempts")]
    DegeneratePolygon(usize),
    #[error("image smaller than the {window}x{window} window ({height}x{width})")]
    ImageTooSmall { window: usize, height: usize, width: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint does not match the configuration:\n{}", .0.join("\n"))]
    CheckpointMismatch(Vec<String>),
    #[error("numerical abort at step {step}: {detail} (last good checkpoint: {})", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NumericalAbort { step: u64, detail: String, last_checkpoint: Option<PathBuf> },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("JSON error at {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Tensor(#[from] panofill_autograd::TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
