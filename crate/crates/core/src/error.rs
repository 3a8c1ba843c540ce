use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} row {row} has zero norm")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Domain(String),

    #[error("query has no positive in the retrieval set")]
    NoPositives,

    #[error("calibration loss needs at least one positive or negative")]
    EmptyInstance,

    #[error("batch {batch} holds no positive for the query")]
    EmptyBatch { batch: usize },

    #[error("scores at indices {0} and {1} are tied; the sort-based oracle needs distinct scores")]
    DuplicateScores(usize, usize),

    #[error("{elements} elements exceed the exhaustive enumeration limit of {limit}")]
    TooLarge { elements: usize, limit: usize },

    #[error("infeasible batch sampler: {0}")]
    Infeasible(String),

    #[error("no query with a positive to evaluate")]
    NoValidQuery,

    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("dataset line {line}: {reason}")]
    Dataset { line: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
