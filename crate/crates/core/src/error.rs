use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("non-positive scale: {0}")]
    NonPositiveScale(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("non-differentiable routing: gradients require soft routing mode")]
    NonDifferentiableRouting,

    #[error("formula domain: {0}")]
    FormulaDomain(String),

    #[error("all mixture weights are zero")]
    AllWeightsZero,

    #[error("empty batch")]
    EmptyBatch,

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("NaN loss at step {step} (lr = {lr})")]
    NanLoss { step: usize, lr: f64 },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model kind mismatch: {0}")]
    KindMismatch(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("cache miss for entity `{0}`")]
    CacheMiss(String),

    #[error("stale cache: fingerprint {cache} does not match model {model}")]
    StaleCache { cache: String, model: String },

    #[error("duplicate entity key `{0}`")]
    DuplicateKey(String),

    #[error("non-positive target value {0}")]
    NonPositiveTarget(f64),

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("rows out of time order at row {row}")]
    Unordered { row: usize },

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty dataset file")]
    EmptyFile,

    #[error("unsupported format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
