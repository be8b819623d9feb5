use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no tumour cells counted (positive + negative = 0)")]
    ZeroCells,

    #[error("tissue mask has {found} pixels, at least {required} required")]
    EmptyTissue { found: usize, required: usize },

    #[error("only {found} qualifying patches found, {required} required")]
    InsufficientPatches { found: usize, required: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("regime {regime} requires the {missing} dataset")]
    MissingDataset { regime: String, missing: &'static str },

    #[error("{samples} samples cannot be split into {folds} folds")]
    TooFewSamples { samples: usize, folds: usize },

    #[error("calibration mismatch: {pred} vs {gt} microns per pixel")]
    CalibrationMismatch { pred: f64, gt: f64 },

    #[error("precision and recall undefined: no cells in prediction or ground truth")]
    NoCells,

    #[error("TMA {0:?} does not map to a known patient")]
    UnknownPatient(String),

    #[error("ANOVA undefined: {0}")]
    DegenerateGroups(String),

    #[error("perplexity unreachable for points {indices:?}")]
    DegenerateInput { indices: Vec<usize> },

    #[error("could not place {requested} nuclei ({placed} placed)")]
    PlacementOverflow { requested: usize, placed: usize },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("dataset missing: {0}")]
    DatasetMissing(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.into().context(context))
    }
}
