use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected} nodes, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{kind} index {index} out of vocabulary (size {size})")]
    OutOfVocab {
        kind: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("space '{0}' is not enumerable (no template)")]
    NotEnumerable(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("degenerate single-step kernel at t={t}: abar[t-1] = 0")]
    DegenerateRatio { t: usize },
    #[error("zero posterior normalizer at ({kind} position {index}, t={t}, category {category})")]
    ZeroNormalizer {
        kind: &'static str,
        index: usize,
        t: usize,
        category: usize,
    },
    #[error("zero renormalizer in combined scores at row {row}")]
    ZeroCombined { row: usize },
    #[error("invalid condition schema: {0}")]
    InvalidSchema(String),
    #[error("unknown condition name '{name}'; schema defines: {known}")]
    UnknownCondition { name: String, known: String },
    #[error("invalid config field '{field}': {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error("checkpoint schema hash mismatch: expected {expected}, got {got}")]
    SchemaHashMismatch { expected: String, got: String },
    #[error("duplicate benchmark key at line {line}")]
    DuplicateKey { line: usize },
    #[error("malformed benchmark row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("validity retry budget exhausted: {produced} of {requested} cells")]
    RetryBudgetExhausted { produced: usize, requested: usize },
    #[error("insufficient cells: need {needed}, have {have}")]
    InsufficientCells { needed: usize, have: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
