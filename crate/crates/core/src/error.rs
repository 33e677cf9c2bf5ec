use std::path::PathBuf;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown decoder block index {0}")]
    UnknownBlockIndex(usize),

    #[error("encoder block {0} requested; only decoder blocks can be tapped")]
    EncoderBlockRequested(usize),

    #[error("feature map for image size {expected:?} got {got:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("incomplete feature set: {0}")]
    IncompleteFeatureSet(String),

    #[error("downsample requested: {from:?} -> {to:?}")]
    DownsampleRequested {
        from: (usize, usize),
        to: (usize, usize),
    },

    #[error("empty text annotation")]
    EmptyText,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing attention params for scale {0}")]
    MissingScaleParams(usize),

    #[error("invalid dims: {0}")]
    InvalidDims(String),

    #[error("probabilities outside [0, 1]")]
    RangeViolation,

    #[error("frozen parameters changed: {0}")]
    FrozenViolation(String),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("block selection mismatch: trained on {trained}, evaluating with {requested}")]
    SelectionMismatch { trained: String, requested: String },

    #[error("shapes cannot be placed at resolution {0}x{1}")]
    ShapesUnplaceable(usize, usize),

    #[error("missing mask for {0}")]
    MissingMask(String),

    #[error("missing text row for {0}")]
    MissingTextRow(String),

    #[error("unreadable file for {id}: {reason}")]
    UnreadableFile { id: String, reason: String },

    #[error("train_n {train_n} too large for {total} samples")]
    TrainNTooLarge { train_n: usize, total: usize },

    #[error("no metrics.csv under {0}")]
    MissingMetrics(PathBuf),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
