use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid attribution: {0}")]
    InvalidAttribution(String),

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("invalid feature grouping: {0}")]
    InvalidGrouping(String),

    #[error("ground-truth mask must contain both inside and outside features")]
    DegenerateMask,

    #[error("shape mismatch: expected {expected}, got {actual} ({context})")]
    Shape {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged: loss became non-finite at step {step}")]
    DivergedTraining { step: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),

    #[error("explainer `{0}` is not supported for this model")]
    UnsupportedExplainer(&'static str),

    #[error("exhaustive enumeration of {features}! rankings refused (limit is 10 features); use sampling instead")]
    RefuseExhaustive { features: usize },

    #[error("M = {m} is out of range 0..={max}")]
    InvalidM { m: usize, max: usize },

    #[error("k = {k} is out of range 1..={max}")]
    InvalidK { k: usize, max: usize },

    #[error("total positive attribution is zero")]
    AllNonPositive,

    #[error("invalid metric parameter: {0}")]
    InvalidMetricParam(String),

    #[error("correlation is undefined: a series has zero variance")]
    DegenerateCorrelation,

    #[error("series contains a non-finite value at index {0}")]
    NonFiniteSeries(usize),

    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("consistency component `{name}` = {value} is outside [0, 1]")]
    InvalidComponent { name: &'static str, value: f64 },

    #[error("inter-consistency under minor perturbation needs at least two explanation methods")]
    NeedTwoMethods,

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("data generation failed: {0}")]
    GenerationFailed(String),

    #[error("patch of size {patch} does not fit a {height}x{width} grid")]
    InvalidPatch {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: unknown label `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: u64,
        label: String,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, actual: usize, context: &'static str) -> Self {
        Error::Shape {
            expected,
            actual,
            context,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
