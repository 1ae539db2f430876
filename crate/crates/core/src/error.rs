use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel value {value} at index {index} is outside [0, 255]")]
    PixelOutOfRange { index: usize, value: i64 },

    #[error("pixel buffer has length {actual}, expected {rows}x{cols}x{channels} = {expected}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },

    #[error("image has {rows} rows, which is not divisible by 4")]
    RowsNotDivisibleByFour { rows: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("row band [{start}, {end}] is invalid for an image with {rows} rows")]
    InvalidBand { start: usize, end: usize, rows: usize },

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("missing class directory `{0}`")]
    MissingClass(String),

    #[error("images do not share dimensions: {0}")]
    NonUniformDimensions(String),

    #[error("dataset split is empty: {0}")]
    EmptySplit(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("length mismatch: {0} vs {1}")]
    VectorLength(usize, usize),

    #[error("class {class} has {have} samples, at least {need} required")]
    TooFewSamples { class: usize, have: usize, need: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("detector is not calibrated")]
    Uncalibrated,

    #[error("predictor mask is empty")]
    EmptyMask,

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
