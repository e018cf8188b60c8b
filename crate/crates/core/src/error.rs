use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum CppError {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stale or mismatched trace: {0}")]
    Trace(String),
    #[error("backbone is frozen: {0}")]
    Frozen(String),
    #[error("sample {0} has no negatives or anchors to form a denominator")]
    AnchorlessSample(usize),
    #[error("prototype store is empty")]
    EmptyStore,
    #[error("task {0} already committed")]
    DuplicateTask(u32),
    #[error("class {0} already committed")]
    DuplicateClass(u32),
    #[error("unknown key: {0}")]
    Key(String),
    #[error("pretext classes overlap the evaluation stream: {0}")]
    Leakage(String),
    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),
    #[error("forgetting is undefined after a single task")]
    UndefinedForgetting,
    #[error("bad file format: {0}")]
    Format(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CppError>;
