use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} implies {expected} values, got {got}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op} requires a batch of at least {min} rows, got {got}")]
    BatchTooSmall {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by backward; build a fresh graph")]
    GraphConsumed,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("model expects input dim {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("checkpoint architecture {checkpoint:?} does not match expected {expected:?}")]
    ArchMismatch {
        checkpoint: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("pretraining diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("could not place cluster {index} at separation {separation} in dim {dim} within {attempts} attempts")]
    InfeasibleSeparation {
        index: usize,
        separation: f64,
        dim: usize,
        attempts: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("row {0} has zero norm; cosine similarity undefined")]
    ZeroNormRow(usize),

    #[error("GMM fit requires at least 4 scores, got {0}")]
    TooFewScores(usize),

    #[error("method {0} requires a filter output")]
    MissingFilter(&'static str),

    #[error("non-finite loss in {method} at batch {batch}")]
    LossDiverged { method: String, batch: usize },

    #[error("checkpoint format error: {0}")]
    BadCheckpoint(String),

    #[error("csv parse error at line {line}: {msg}")]
    BadCsv { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
