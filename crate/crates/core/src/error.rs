use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::validate::Finding;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed validation; carries every finding, not just the first.
    #[error("validation failed: {}", summarize(.0))]
    Validation(Vec<Finding>),

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's contract (shape mismatch, bad index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("step {t} out of range (valid: {min}..={max})")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend mismatch: bundle was built for `{expected}`, got `{actual}`")]
    BackendMismatch { expected: String, actual: String },

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("cancelled at step {0}")]
    Cancelled(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(finding: Finding) -> Self {
        Error::Validation(vec![finding])
    }

    /// Stable machine-readable name of the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::Backend(_) => "backend",
            Error::BackendMismatch { .. } => "backend_mismatch",
            Error::Bundle(_) => "bundle",
            Error::Decode(_) => "decode",
            Error::Cancelled(_) => "cancelled",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    /// True for errors originating in the denoiser backend or its weights.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Backend(_) | Error::BackendMismatch { .. } | Error::Decode(_)
        )
    }
}

fn summarize(findings: &[Finding]) -> String {
    findings
        .iter()
        .map(|f| f.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}
