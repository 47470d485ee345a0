//! Clients for the generative services: chat completion, text-to-image
//! (plain and subject-conditioned) and text embedding.
//!
//! Each service is a small trait. Implementations come in two flavours, HTTP
//! ([`http`]) and deterministic mocks ([`mock`]). The [`Backends`] facade
//! adds retry, the global in-flight cap and the audit log on top.

pub mod audit;
pub mod config;
pub mod http;
pub mod mock;
pub mod retry;
mod service;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::prompt::{ImagePrompt, PromptText};

pub use audit::{AuditLog, AuditRecord};
pub use config::{BackendKind, BackendSpec, BackendsConfig, MOCK_CONFIG};
pub use retry::{with_retry, ConcurrencyLimiter, RecordingSleeper, RetryPolicy, Sleeper, ThreadSleeper};
pub use service::{route_image_request, sidecar_path, Backends, BackendsBuilder, ABLATION_NO_SUBJECT};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_IMAGE_SIZE: u32 = 512;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{backend}: transport failure: {message}")]
    Transport { backend: String, message: String },
    #[error("{backend}: rate limited: {message}")]
    RateLimited { backend: String, message: String },
    #[error("{backend}: request {request_id} refused: {message}")]
    Refusal {
        backend: String,
        request_id: String,
        message: String,
    },
    #[error("{backend}: capability mismatch: {message}")]
    CapabilityMismatch { backend: String, message: String },
    #[error("{backend}: embedding {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        backend: String,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{backend}: malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<BackendError>,
    },
}

impl BackendError {
    /// Transport faults and rate limiting are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. } | BackendError::RateLimited { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BackendError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    /// Sampling seed; services that ignore seeds still get it.
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(prompt: PromptText, model_id: impl Into<String>) -> Self {
        Self {
            prompt,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_id: model_id.into(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub prompt: ImagePrompt,
    pub width: u32,
    pub height: u32,
    pub seed: Option<u64>,
    pub model_id: String,
}

impl ImageRequest {
    pub fn new(prompt: ImagePrompt, model_id: impl Into<String>) -> Self {
        Self {
            prompt,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            seed: None,
            model_id: model_id.into(),
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

/// A generated image on disk plus the sidecar describing how it was made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub path: PathBuf,
    pub meta_path: PathBuf,
    pub prompt_text: String,
    pub backend_id: String,
    pub seed: Option<u64>,
    pub created_at: String,
    pub ablation: Option<String>,
    pub sha256: String,
}

/// Contents of `<image>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub image: String,
    pub prompt_text: String,
    pub backend_id: String,
    pub model_id: String,
    pub seed: Option<u64>,
    pub width: u32,
    pub height: u32,
    pub subject_conditioned: bool,
    pub subject_word: Option<String>,
    pub reference_image: Option<String>,
    pub ablation: Option<String>,
    pub sha256: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub backend_id: String,
    pub dimension: usize,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, backend_id: impl Into<String>) -> Self {
        Self {
            dimension: values.len(),
            values,
            backend_id: backend_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCapability {
    /// Prompt text only.
    TextOnly,
    /// Prompt text plus reference image and subject word.
    SubjectConditioned,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

pub trait ImageBackend: Send + Sync {
    fn id(&self) -> &str;
    fn capability(&self) -> ImageCapability;
    /// Returns PNG bytes.
    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// RFC 3339 timestamp; honours `SOURCE_DATE_EPOCH` for reproducible runs.
pub fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    fixed
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
