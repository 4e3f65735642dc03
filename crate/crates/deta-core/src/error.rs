use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below the {0:e} guard")]
    ZeroVector(f64),
    #[error("vector lengths differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("box [{row0},{row1})x[{col0},{col1}) does not fit a {rows}x{cols} grid")]
    BoxOutOfBounds {
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        rows: usize,
        cols: usize,
    },
    #[error("region side {side} exceeds the grid's shorter dimension {limit}")]
    SideTooLarge { side: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("OOD pool exhausted: need {needed} samples, have {available}")]
    PoolExhausted { needed: usize, available: usize },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {label} has {count} support sample(s); need at least two")]
    TooFewSamples { label: usize, count: usize },
    #[error("no accumulated weight for sample {0} after the first iteration")]
    MissingPrevState(u64),
    #[error("every image of class {0} fell below the weight threshold")]
    AllImagesFiltered(usize),
    #[error("class labels differ: {left} vs {right}")]
    ClassMismatch { left: usize, right: usize },
    #[error("prototype of class {0} is degenerate (zero norm)")]
    DegeneratePrototype(usize),
    #[error("embedding collapsed to zero before normalization")]
    ZeroEmbedding,
    #[error("loss or gradient is not finite")]
    NonFiniteLoss,
    #[error("memory bank holds no region for class {0}")]
    EmptyBankClass(usize),
    #[error("empty input list")]
    EmptyList,
    #[error("average ranks sum to {got}, expected k(k+1)/2 = {expected}")]
    RankSumInvalid { got: f64, expected: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
