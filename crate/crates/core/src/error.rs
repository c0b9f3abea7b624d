use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("language graph contains a cycle")]
    Cycle,
    #[error("language graph is disconnected")]
    Disconnected,
    #[error("language graph does not have exactly one root: {0}")]
    MultiRoot(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("degenerate box: width and height must be positive")]
    DegenerateBox,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("phrase has no words")]
    EmptyPhrase,
    #[error("belief index sets do not match")]
    IndexSetMismatch,
    #[error("graph has no relations")]
    NoRelations,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("exhaustive search budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("substitution rejected: expression still matches the scene")]
    Rejected,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("unknown word in vocabulary-free encoder: {0}")]
    UnknownSample(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("trace replay diverged at step {step}: {reason}")]
    TraceMismatch { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
