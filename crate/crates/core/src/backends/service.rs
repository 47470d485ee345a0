use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::audit::{AuditLog, AuditRecord};
use super::retry::{with_retry, ConcurrencyLimiter, RetryPolicy, Sleeper, ThreadSleeper};
use super::{
    timestamp, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, EmbeddingVector,
    ImageAsset, ImageBackend, ImageCapability, ImageRequest, ImageSidecar, DEFAULT_IMAGE_SIZE,
    DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::digest::{sha256_hex, sha256_parts};
use crate::prompt::{ImagePrompt, PromptText};

/// Sidecar marker for action-route images rendered without subject
/// conditioning.
pub const ABLATION_NO_SUBJECT: &str = "no_subject_conditioning";

#[derive(Clone)]
struct ImageSlot {
    backend: Arc<dyn ImageBackend>,
    model_id: String,
    width: u32,
    height: u32,
}

/// Retrying, rate-limited, audited access to all configured services.
pub struct Backends {
    chat: Option<Arc<dyn ChatBackend>>,
    chat_model: String,
    temperature: f64,
    max_tokens: u32,
    image_text: Option<ImageSlot>,
    image_subject: Option<ImageSlot>,
    embedders: BTreeMap<String, Arc<dyn EmbeddingBackend>>,
    policy: RetryPolicy,
    limiter: ConcurrencyLimiter,
    sleeper: Arc<dyn Sleeper>,
    audit: Arc<AuditLog>,
    config_digest: String,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("chat", &self.chat.as_ref().map(|c| c.id().to_string()))
            .field("image_text", &self.image_text.as_ref().map(|s| s.backend.id().to_string()))
            .field("image_subject", &self.image_subject.as_ref().map(|s| s.backend.id().to_string()))
            .field("embedders", &self.embedders.keys().collect::<Vec<_>>())
            .field("policy", &self.policy)
            .finish()
    }
}

pub struct BackendsBuilder {
    chat: Option<Arc<dyn ChatBackend>>,
    chat_model: String,
    temperature: f64,
    max_tokens: u32,
    image_text: Option<ImageSlot>,
    image_subject: Option<ImageSlot>,
    image_params: BTreeMap<u8, (String, u32, u32)>,
    embedders: BTreeMap<String, Arc<dyn EmbeddingBackend>>,
    policy: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    audit: Arc<AuditLog>,
    config_digest: String,
}

fn cap_key(cap: ImageCapability) -> u8 {
    match cap {
        ImageCapability::TextOnly => 0,
        ImageCapability::SubjectConditioned => 1,
    }
}

impl BackendsBuilder {
    pub fn chat(mut self, chat: Arc<dyn ChatBackend>) -> Self {
        if self.chat_model.is_empty() {
            self.chat_model = chat.id().to_string();
        }
        self.chat = Some(chat);
        self
    }

    pub fn chat_params(mut self, model_id: String, temperature: Option<f64>, max_tokens: Option<u32>) -> Self {
        if !model_id.is_empty() {
            self.chat_model = model_id;
        }
        self.temperature = temperature.unwrap_or(DEFAULT_TEMPERATURE);
        self.max_tokens = max_tokens.unwrap_or(DEFAULT_MAX_TOKENS);
        self
    }

    pub fn image_params(mut self, model_id: String, cap: ImageCapability, width: Option<u32>, height: Option<u32>) -> Self {
        self.image_params.insert(
            cap_key(cap),
            (
                model_id,
                width.unwrap_or(DEFAULT_IMAGE_SIZE),
                height.unwrap_or(DEFAULT_IMAGE_SIZE),
            ),
        );
        self
    }

    fn slot(&self, backend: Arc<dyn ImageBackend>, cap: ImageCapability) -> ImageSlot {
        let (model_id, width, height) = self
            .image_params
            .get(&cap_key(cap))
            .cloned()
            .unwrap_or_else(|| (backend.id().to_string(), DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE));
        ImageSlot {
            backend,
            model_id: if model_id.is_empty() { "default".into() } else { model_id },
            width,
            height,
        }
    }

    /// Backend for plain text-to-image requests.
    pub fn image_text(mut self, backend: Arc<dyn ImageBackend>) -> Self {
        self.image_text = Some(self.slot(backend, ImageCapability::TextOnly));
        self
    }

    /// Backend for subject-conditioned requests. Its advertised capability
    /// is checked per request, not here.
    pub fn image_subject(mut self, backend: Arc<dyn ImageBackend>) -> Self {
        self.image_subject = Some(self.slot(backend, ImageCapability::SubjectConditioned));
        self
    }

    pub fn embedder(mut self, backend: Arc<dyn EmbeddingBackend>) -> Self {
        self.embedders.insert(backend.id().to_string(), backend);
        self
    }

    pub fn policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = audit;
        self
    }

    pub fn config_digest(mut self, digest: String) -> Self {
        self.config_digest = digest;
        self
    }

    pub fn build(self) -> Backends {
        Backends {
            chat: self.chat,
            chat_model: self.chat_model,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            image_text: self.image_text,
            image_subject: self.image_subject,
            embedders: self.embedders,
            limiter: ConcurrencyLimiter::new(self.policy.max_concurrent),
            policy: self.policy,
            sleeper: self.sleeper,
            audit: self.audit,
            config_digest: self.config_digest,
        }
    }
}

/// Picks the backend for an image request and rewrites the request when the
/// subject-conditioning ablation applies. Returns the chosen backend, the
/// request to send and the ablation marker, if any.
pub fn route_image_request<'a>(
    req: &ImageRequest,
    text_backend: Option<&'a Arc<dyn ImageBackend>>,
    subject_backend: Option<&'a Arc<dyn ImageBackend>>,
    ablate_subject_conditioning: bool,
) -> Result<(&'a Arc<dyn ImageBackend>, ImageRequest, Option<&'static str>), BackendError> {
    let missing = |what: &str| BackendError::Config(format!("no {what} image backend configured"));
    if req.prompt.subject_conditioned && ablate_subject_conditioning {
        let backend = text_backend.ok_or_else(|| missing("text-to-image"))?;
        let mut plain = req.clone();
        plain.prompt = ImagePrompt {
            text: req.prompt.text.clone(),
            subject_conditioned: false,
            reference_image: None,
            subject_word: None,
        };
        return Ok((backend, plain, Some(ABLATION_NO_SUBJECT)));
    }
    let (backend, wanted) = if req.prompt.subject_conditioned {
        (
            subject_backend.ok_or_else(|| missing("subject-conditioned"))?,
            ImageCapability::SubjectConditioned,
        )
    } else {
        (
            text_backend.ok_or_else(|| missing("text-to-image"))?,
            ImageCapability::TextOnly,
        )
    };
    if backend.capability() != wanted {
        return Err(BackendError::CapabilityMismatch {
            backend: backend.id().to_string(),
            message: format!(
                "request needs {wanted:?} but backend advertises {:?}",
                backend.capability()
            ),
        });
    }
    Ok((backend, req.clone(), None))
}

fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<(), BackendError> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| BackendError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| BackendError::io(dest, e))?;
    tmp.persist(dest).map_err(|e| BackendError::io(dest, e.error))?;
    Ok(())
}

/// `<image>.meta.json` next to `image`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut name = image.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    image.with_file_name(name)
}

impl Backends {
    pub fn builder() -> BackendsBuilder {
        BackendsBuilder {
            chat: None,
            chat_model: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            image_text: None,
            image_subject: None,
            image_params: BTreeMap::new(),
            embedders: BTreeMap::new(),
            policy: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
            audit: Arc::new(AuditLog::memory()),
            config_digest: String::new(),
        }
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn limiter(&self) -> &ConcurrencyLimiter {
        &self.limiter
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn encoder_ids(&self) -> Vec<String> {
        self.embedders.keys().cloned().collect()
    }

    pub fn chat_id(&self) -> Option<&str> {
        self.chat.as_deref().map(ChatBackend::id)
    }

    pub fn subject_backend_id(&self) -> Option<&str> {
        self.image_subject.as_ref().map(|s| s.backend.id())
    }

    pub fn text_image_backend_id(&self) -> Option<&str> {
        self.image_text.as_ref().map(|s| s.backend.id())
    }

    fn call<T>(
        &self,
        operation: &str,
        backend_id: &str,
        digest: &str,
        f: impl Fn() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        with_retry(&self.policy, self.sleeper.as_ref(), |attempt| {
            let _permit = self.limiter.acquire();
            let started = Instant::now();
            let result = f();
            self.audit.record(AuditRecord {
                operation: operation.to_string(),
                backend_id: backend_id.to_string(),
                request_digest: digest.to_string(),
                attempt,
                latency_ms: started.elapsed().as_secs_f64() * 1e3,
                outcome: match &result {
                    Ok(_) => "ok".to_string(),
                    Err(e) => format!("error: {e}"),
                },
            })?;
            result
        })
    }

    /// A chat request carrying the configured model and sampling parameters.
    pub fn chat_request(&self, prompt: PromptText, seed: Option<u64>) -> ChatRequest {
        ChatRequest {
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            model_id: self.chat_model.clone(),
            seed,
        }
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let chat = self
            .chat
            .as_ref()
            .ok_or_else(|| BackendError::Config("no chat backend configured".into()))?;
        let digest = req.digest();
        let text = self.call("chat", chat.id(), &digest, || chat.complete(req))?;
        if text.trim().is_empty() {
            return Err(BackendError::Refusal {
                backend: chat.id().to_string(),
                request_id: digest,
                message: "empty completion".into(),
            });
        }
        Ok(text)
    }

    /// An image request sized and labelled for the backend that would
    /// serve `prompt`.
    pub fn image_request(&self, prompt: ImagePrompt, seed: Option<u64>) -> ImageRequest {
        let slot = if prompt.subject_conditioned {
            self.image_subject.as_ref()
        } else {
            self.image_text.as_ref()
        };
        let (model_id, width, height) = slot
            .map(|s| (s.model_id.clone(), s.width, s.height))
            .unwrap_or_else(|| ("default".into(), DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE));
        ImageRequest {
            prompt,
            width,
            height,
            seed,
            model_id,
        }
    }

    /// Generates one image into `dest` (PNG) plus its sidecar. Both files are
    /// written to a temporary name first and renamed into place.
    pub fn generate_image(
        &self,
        req: &ImageRequest,
        dest: &Path,
        ablate_subject_conditioning: bool,
    ) -> Result<ImageAsset, BackendError> {
        let text = self.image_text.as_ref().map(|s| &s.backend);
        let subject = self.image_subject.as_ref().map(|s| &s.backend);
        let (backend, mut routed, ablation) =
            route_image_request(req, text, subject, ablate_subject_conditioning)?;
        if ablation.is_some() {
            if let Some(slot) = &self.image_text {
                routed.model_id = slot.model_id.clone();
            }
        }
        let digest = routed.digest();
        let bytes = self.call("image", backend.id(), &digest, || backend.generate(&routed))?;
        if !bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            return Err(BackendError::Malformed {
                backend: backend.id().to_string(),
                message: "image payload is not a PNG".into(),
            });
        }
        let sha256 = sha256_hex(&bytes);
        let created_at = timestamp();
        write_atomic(dest, &bytes)?;
        let meta_path = sidecar_path(dest);
        let sidecar = ImageSidecar {
            image: dest
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            prompt_text: routed.prompt.text.clone(),
            backend_id: backend.id().to_string(),
            model_id: routed.model_id.clone(),
            seed: routed.seed,
            width: routed.width,
            height: routed.height,
            subject_conditioned: routed.prompt.subject_conditioned,
            subject_word: routed.prompt.subject_word.clone(),
            reference_image: routed
                .prompt
                .reference_image
                .as_ref()
                .map(|p| p.display().to_string()),
            ablation: ablation.map(str::to_string),
            sha256: sha256.clone(),
            created_at: created_at.clone(),
        };
        let mut meta = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        meta.push(b'\n');
        write_atomic(&meta_path, &meta)?;
        Ok(ImageAsset {
            path: dest.to_path_buf(),
            meta_path,
            prompt_text: routed.prompt.text,
            backend_id: backend.id().to_string(),
            seed: routed.seed,
            created_at,
            ablation: ablation.map(str::to_string),
            sha256,
        })
    }

    /// Embeds `texts` with encoder `backend_id`; one vector per text, all of
    /// the same dimension.
    pub fn embed(&self, texts: &[String], backend_id: &str) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::Config("embed called with no texts".into()));
        }
        let encoder = self.embedders.get(backend_id).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown encoder '{backend_id}' (configured: {})",
                self.encoder_ids().join(", ")
            ))
        })?;
        let digest = hex::encode(sha256_parts(texts.iter()));
        let vectors = self.call("embed", backend_id, &digest, || encoder.embed(texts))?;
        if vectors.len() != texts.len() {
            return Err(BackendError::Malformed {
                backend: backend_id.to_string(),
                message: format!("{} vectors for {} texts", vectors.len(), texts.len()),
            });
        }
        let dim = vectors[0].len();
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != dim || dim == 0 {
                return Err(BackendError::DimensionMismatch {
                    backend: backend_id.to_string(),
                    index,
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(BackendError::Malformed {
                    backend: backend_id.to_string(),
                    message: format!("embedding {index} has non-finite values"),
                });
            }
        }
        Ok(vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(v, backend_id))
            .collect())
    }
}
