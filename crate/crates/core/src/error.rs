use std::path::PathBuf;

use thiserror::Error;

/// Errors from the volume file format and other binary codecs.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic (not a volume file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: header metadata is not valid JSON: {source}")]
    BadHeaderJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(
        "{path}: payload size mismatch: header shape {shape:?} dtype {dtype} \
         expects {expected} bytes, found {actual}"
    )]
    PayloadSize {
        path: PathBuf,
        shape: [usize; 3],
        dtype: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unknown dtype {dtype:?} (expected \"f32\" or \"u32\")")]
    BadDtype { path: PathBuf, dtype: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Validation failures on specs and configs. Collects every violation so a
/// caller sees the full list at once.
#[derive(Debug, Error)]
#[error("invalid {what}: {}", violations.join("; "))]
pub struct SpecError {
    pub what: String,
    pub violations: Vec<String>,
}

impl SpecError {
    pub fn new(what: impl Into<String>, violations: Vec<String>) -> Self {
        Self {
            what: what.into(),
            violations,
        }
    }

    /// Ok when no violations were collected.
    pub fn check(what: impl Into<String>, violations: Vec<String>) -> Result<(), SpecError> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Self::new(what, violations))
        }
    }
}

/// Shape or compatibility mismatch between runtime values.
#[derive(Debug, Error)]
#[error("shape mismatch in {context}: {detail}")]
pub struct ShapeError {
    pub context: String,
    pub detail: String,
}

impl ShapeError {
    pub fn new(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

/// Failures inside an optimization loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: non-finite value in {term}")]
    NonFinite { step: u64, term: String },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
