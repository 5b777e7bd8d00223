use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum SpadeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    BadTensor { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    BadConfig { path: PathBuf, reason: String },
    #[error("{0}")]
    Core(#[from] spade_core::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = SpadeError> = std::result::Result<T, E>;

impl SpadeError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn manifest(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Self::MalformedManifest {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn tensor(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Self::BadTensor {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        use spade_core::Error as E;
        match self {
            Self::Io { .. } => "IoError",
            Self::MalformedManifest { .. } => "MalformedManifest",
            Self::BadTensor { .. } => "MalformedTensor",
            Self::BadConfig { .. } => "BadConfig",
            Self::Usage(_) => "UsageError",
            Self::Core(e) => match e {
                E::DimMismatch { .. } => "DimMismatch",
                E::NonFiniteValue(_) => "NonFiniteValue",
                E::EmptySpot => "EmptySpot",
                E::GeneVocabularyMismatch => "GeneVocabularyMismatch",
                E::InvalidBank(_) => "InvalidBank",
                E::GeneIndexOutOfRange { .. } => "GeneIndexOutOfRange",
                E::TooFewPoints { .. } => "TooFewPoints",
                E::InsufficientData(_) => "InsufficientData",
                E::DegenerateLabels => "DegenerateLabels",
                E::NoValidClass => "NoValidClass",
                E::NoComparablePairs => "NoComparablePairs",
                E::InvalidArgument(_) => "InvalidArgument",
            },
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            Self::Io { path, .. }
            | Self::MalformedManifest { path, .. }
            | Self::BadTensor { path, .. }
            | Self::BadConfig { path, .. } => Some(path),
            _ => None,
        }
    }

    /// The error as a single JSON object, as printed on stderr by the CLI.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<String>,
        }
        serde_json::to_string(&Report {
            error: self.kind(),
            message: self.to_string(),
            path: self.path().map(|p| p.display().to_string()),
        })
        .expect("error report serializes")
    }
}

/// `DimMismatch` from the core, for header cross-checks.
pub(crate) fn dim_mismatch(expected: usize, actual: usize, context: &'static str) -> SpadeError {
    SpadeError::Core(spade_core::Error::DimMismatch {
        expected,
        actual,
        context,
    })
}
