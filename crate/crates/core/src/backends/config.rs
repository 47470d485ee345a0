//! `backends.toml`: one table per backend under `[backends.<id>]`.
//!
//! ```toml
//! [retry]
//! max_attempts = 4
//! base_delay_ms = 500
//! backoff_factor = 2.0
//! max_concurrent = 8
//!
//! [backends.gpt35]
//! kind = "chat"                       # chat | image | image_subject | embed
//! base_url = "https://api.example.com/v1"   # or "mock://"
//! model_id = "gpt-3.5-turbo"
//! api_key_env = "OPENAI_API_KEY"      # key is read from this variable
//! ```
//!
//! Mock-only keys: `fixture` (chat; file returned verbatim, relative to the
//! config file), `items_per_response` (chat), `dimension` (embed).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::http::{HttpChat, HttpEmbedder, HttpEndpoint, HttpImage};
use super::mock::{MockChat, MockEncoder, MockImage};
use super::service::BackendsBuilder;
use super::{BackendError, Backends, ImageCapability, RetryPolicy};
use crate::digest::sha256_hex;

pub const MOCK_SCHEME: &str = "mock://";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Chat,
    Image,
    ImageSubject,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub base_url: String,
    #[serde(default)]
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items_per_response: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

impl BackendSpec {
    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with(MOCK_SCHEME)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrySection {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_factor")]
    pub backoff_factor: f64,
    #[serde(default = "default_concurrent")]
    pub max_concurrent: usize,
}

fn default_attempts() -> u32 {
    RetryPolicy::default().max_attempts
}
fn default_delay() -> u64 {
    RetryPolicy::default().base_delay.as_millis() as u64
}
fn default_factor() -> f64 {
    RetryPolicy::default().backoff_factor
}
fn default_concurrent() -> usize {
    RetryPolicy::default().max_concurrent
}

impl Default for RetrySection {
    fn default() -> Self {
        Self {
            max_attempts: default_attempts(),
            base_delay_ms: default_delay(),
            backoff_factor: default_factor(),
            max_concurrent: default_concurrent(),
        }
    }
}

impl RetrySection {
    pub fn policy(&self) -> Result<RetryPolicy, BackendError> {
        RetryPolicy::new(
            self.max_attempts,
            Duration::from_millis(self.base_delay_ms),
            self.backoff_factor,
            self.max_concurrent,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub retry: RetrySection,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    /// Directory relative paths (`fixture`) resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Mock configuration written by `catalogs write-defaults` and used in tests.
pub const MOCK_CONFIG: &str = r#"# Deterministic mock backends. Swap base_url for a real service to go live.
[retry]
max_attempts = 3
base_delay_ms = 10
backoff_factor = 2.0
max_concurrent = 8

[backends.gpt35]
kind = "chat"
base_url = "mock://"
model_id = "gpt-3.5-turbo"

[backends.sdxl]
kind = "image"
base_url = "mock://"
model_id = "stable-diffusion-xl"

[backends.blip]
kind = "image_subject"
base_url = "mock://"
model_id = "blip-diffusion"

[backends.sbert]
kind = "embed"
base_url = "mock://"
model_id = "sentence-bert"
dimension = 384

[backends.gpt3]
kind = "embed"
base_url = "mock://"
model_id = "gpt3-embedding"
dimension = 1536
"#;

impl BackendsConfig {
    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let cfg: BackendsConfig =
            toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::io(path, e))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn mock() -> Self {
        Self::parse(MOCK_CONFIG).expect("bundled mock config is valid")
    }

    fn validate(&self) -> Result<(), BackendError> {
        self.retry.policy()?;
        for kind in [BackendKind::Chat, BackendKind::Image, BackendKind::ImageSubject] {
            let n = self.ids_of(kind).len();
            if n > 1 {
                return Err(BackendError::Config(format!(
                    "at most one backend of kind {kind:?} may be configured, found {n}"
                )));
            }
        }
        for (id, spec) in &self.backends {
            if spec.base_url.trim().is_empty() {
                return Err(BackendError::Config(format!("backend {id}: base_url is empty")));
            }
        }
        Ok(())
    }

    pub fn ids_of(&self, kind: BackendKind) -> Vec<&str> {
        self.backends
            .iter()
            .filter(|(_, s)| s.kind == kind)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn spec_of(&self, kind: BackendKind) -> Option<(&str, &BackendSpec)> {
        self.backends
            .iter()
            .find(|(_, s)| s.kind == kind)
            .map(|(id, s)| (id.as_str(), s))
    }

    /// Digest of the effective configuration (ids, kinds, urls, models).
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&(&self.retry, &self.backends)).expect("serializes");
        sha256_hex(canonical)
    }

    fn endpoint(&self, id: &str, spec: &BackendSpec) -> HttpEndpoint {
        let api_key = spec.api_key_env.as_ref().and_then(|var| {
            let key = std::env::var(var).ok();
            if key.is_none() {
                log::warn!("backend {id}: environment variable {var} is not set");
            }
            key
        });
        HttpEndpoint {
            id: id.to_string(),
            base_url: spec.base_url.clone(),
            model_id: spec.model_id.clone(),
            api_key,
            timeout: Duration::from_secs(spec.timeout_secs.unwrap_or(120)),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Instantiates every configured backend.
    pub fn builder(&self) -> Result<BackendsBuilder, BackendError> {
        let mut b = Backends::builder()
            .policy(self.retry.policy()?)
            .config_digest(self.digest());
        for (id, spec) in &self.backends {
            b = match spec.kind {
                BackendKind::Chat => {
                    b = b.chat_params(
                        spec.model_id.clone(),
                        spec.temperature,
                        spec.max_tokens,
                    );
                    if spec.is_mock() {
                        let mut chat = MockChat::new(id.clone());
                        if let Some(n) = spec.items_per_response {
                            chat = chat.items_per_response(n);
                        }
                        if let Some(f) = &spec.fixture {
                            let path = self.resolve(f);
                            let text = fs::read_to_string(&path)
                                .map_err(|e| BackendError::io(&path, e))?;
                            chat = chat.with_fixture(text);
                        }
                        b.chat(Arc::new(chat))
                    } else {
                        b.chat(Arc::new(HttpChat::new(self.endpoint(id, spec))))
                    }
                }
                BackendKind::Image | BackendKind::ImageSubject => {
                    let cap = if spec.kind == BackendKind::Image {
                        ImageCapability::TextOnly
                    } else {
                        ImageCapability::SubjectConditioned
                    };
                    let backend: Arc<dyn super::ImageBackend> = if spec.is_mock() {
                        Arc::new(MockImage::new(id.clone(), cap))
                    } else {
                        Arc::new(HttpImage::new(self.endpoint(id, spec), cap))
                    };
                    let b = b.image_params(spec.model_id.clone(), cap, spec.width, spec.height);
                    match cap {
                        ImageCapability::TextOnly => b.image_text(backend),
                        ImageCapability::SubjectConditioned => b.image_subject(backend),
                    }
                }
                BackendKind::Embed => {
                    if spec.is_mock() {
                        b.embedder(Arc::new(MockEncoder::new(
                            id.clone(),
                            spec.dimension.unwrap_or(384),
                        )))
                    } else {
                        b.embedder(Arc::new(HttpEmbedder::new(self.endpoint(id, spec))))
                    }
                }
            };
        }
        Ok(b)
    }
}
