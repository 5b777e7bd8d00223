use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("spot has no counts")]
    EmptySpot,
    #[error("gene vocabularies differ between samples")]
    GeneVocabularyMismatch,
    #[error("invalid bank: {0}")]
    InvalidBank(String),
    #[error("gene index {index} out of range for {genes} genes")]
    GeneIndexOutOfRange { index: u32, genes: usize },
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("labels contain fewer than two classes")]
    DegenerateLabels,
    #[error("no class has both positive and negative examples")]
    NoValidClass,
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
