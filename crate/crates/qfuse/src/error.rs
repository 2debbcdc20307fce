use thiserror::Error;

/// Errors raised by tensor construction, graph ops and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown op kind '{0}'")]
    UnknownKind(String),
    #[error("loss must be a scalar (1 element), got {0} elements")]
    NotScalarLoss(usize),
    #[error("loss tensor does not belong to this graph")]
    DetachedLoss,
    #[error("non-finite output in {0}")]
    NonFiniteOutput(String),
    #[error("non-finite input to {0}")]
    NonFiniteInput(String),
}

/// Errors raised by model construction, routing and fusion.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("modality '{0}' is already registered")]
    DuplicateModality(String),
    #[error("unknown modality '{0}'")]
    UnknownModality(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("adapter already attached at ({0}, {1})")]
    DuplicateAdapter(String, String),
    #[error("LoRA rank {rank} must satisfy 1 <= rank < {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("no adapter registered at ({0}, {1})")]
    UnknownAdapter(String, String),
    #[error("feature sequence for modality '{0}' is empty")]
    EmptyFeatures(String),
    #[error("expected {expected} supporting tensors, got {got}")]
    WrongModalityCount { expected: usize, got: usize },
    #[error("tensor fusion supports at most {max} modalities, got {got}")]
    UnsupportedArity { max: usize, got: usize },
    #[error("models do not share a stage-1 lineage")]
    LineageMismatch,
    #[error("cohort is missing modality '{0}' required by the stage plan")]
    MissingModalityInCohort(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by the survival loss and metrics.
#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("survival time must be positive and finite, got {0}")]
    NonPositiveTime(f64),
    #[error("no permissible pairs for concordance")]
    NoPermissiblePairs,
    #[error("empty input")]
    EmptyInput,
}

/// Errors raised by cohort generation and dataset I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("corrupt cohort file: {0}")]
    CorruptFile(String),
    #[error("unsupported schema version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
