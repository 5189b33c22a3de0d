use thiserror::Error;

/// Errors raised anywhere in the editing toolkit.
#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("identity loss unavailable: no identity embedder is configured (use lambda_id = 0)")]
    IdentityUnavailable,

    #[error("inverter unavailable: no image inverter is configured")]
    InverterUnavailable,

    #[error("degenerate prompt: {0}")]
    DegeneratePrompt(String),

    #[error("diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Loss totals recorded before the failure.
        history: Vec<f64>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("artifact not found: {0}")]
    NotFound(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EditError>;

impl EditError {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        EditError::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
