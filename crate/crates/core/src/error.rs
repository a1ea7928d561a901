use thiserror::Error;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated file: header declares {expected} payload bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("trailing bytes: header declares {expected} payload bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("embedding matrix must hold at least one row")]
    ZeroCount,
    #[error("invalid label value {value} at index {index}, labels must be 0 or 1")]
    InvalidLabelValue { index: usize, value: u8 },
    #[error("unknown detector tag {0}")]
    InvalidDetectorTag(u8),
    #[error("row {0} has zero norm and cannot be L2-normalized")]
    ZeroRow(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("k={k} too large for a reference set of {refs} points (self-excluded: {exclude_self})")]
    KTooLarge {
        k: usize,
        refs: usize,
        exclude_self: bool,
    },
    #[error("k={0} too small, LID estimation needs k >= 2")]
    KTooSmall(usize),
    #[error("isolation forest needs at least 2 reference points, got {0}")]
    TooFewPoints(usize),
    #[error("dataset of {n} samples too small for k={k}, need at least k+1")]
    DatasetTooSmall { n: usize, k: usize },
    #[error("batch size {batch_size} too small for k={k}, need at least k+1")]
    BatchTooSmall { batch_size: usize, k: usize },
    #[error("labels are degenerate, need at least one clean and one backdoor sample")]
    DegenerateLabels,
    #[error("score vector is empty")]
    EmptyScores,
    #[error("removal index {index} out of range for {count} samples")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("count mismatch: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
