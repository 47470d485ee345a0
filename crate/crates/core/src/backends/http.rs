//! Blocking HTTP clients speaking completion/embedding/image JSON APIs.
//!
//! Endpoints, relative to the configured base URL:
//!
//! | service               | path                 | response field              |
//! |-----------------------|----------------------|-----------------------------|
//! | chat                  | `/chat/completions`  | `choices[0].message.content`|
//! | embeddings            | `/embeddings`        | `data[i].embedding`         |
//! | text-to-image         | `/images/generations`| `data[0].b64_json`          |
//! | subject-conditioned   | `/images/subject`    | `data[0].b64_json`          |
//!
//! HTTP 429 and 5xx and network faults are retryable; other 4xx responses
//! and empty outputs are refusals.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    BackendError, ChatBackend, ChatRequest, EmbeddingBackend, ImageBackend, ImageCapability,
    ImageRequest,
};

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub id: String,
    pub base_url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpEndpoint {
    fn agent(&self) -> ureq::Agent {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build();
        ureq::Agent::new_with_config(config)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value, request_id: &str) -> Result<Value, BackendError> {
        let mut req = self
            .agent()
            .post(&self.url(path))
            .header("Content-Type", "application/json")
            .header("X-Request-Id", request_id);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| BackendError::Transport {
            backend: self.id.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| BackendError::Transport {
                backend: self.id.clone(),
                message: format!("reading body: {e}"),
            })?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| BackendError::Malformed {
                backend: self.id.clone(),
                message: format!("invalid JSON: {e}"),
            }),
            429 => Err(BackendError::RateLimited {
                backend: self.id.clone(),
                message: truncate(&text),
            }),
            500..=599 => Err(BackendError::Transport {
                backend: self.id.clone(),
                message: format!("HTTP {status}: {}", truncate(&text)),
            }),
            _ => Err(BackendError::Refusal {
                backend: self.id.clone(),
                request_id: request_id.to_string(),
                message: format!("HTTP {status}: {}", truncate(&text)),
            }),
        }
    }

    fn malformed(&self, message: impl Into<String>) -> BackendError {
        BackendError::Malformed {
            backend: self.id.clone(),
            message: message.into(),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

#[derive(Debug, Clone)]
pub struct HttpChat {
    endpoint: HttpEndpoint,
}

impl HttpChat {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        Self { endpoint }
    }
}

impl ChatBackend for HttpChat {
    fn id(&self) -> &str {
        &self.endpoint.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut body = json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt.text}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let request_id = req.digest();
        let value = self.endpoint.post("/chat/completions", &body, &request_id)?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| self.endpoint.malformed("missing choices[0].message.content"))?;
        Ok(content.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: HttpEndpoint,
}

impl HttpEmbedder {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        Self { endpoint }
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> &str {
        &self.endpoint.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({"model": self.endpoint.model_id, "input": texts});
        let request_id = crate::digest::sha256_hex(body.to_string());
        let value = self.endpoint.post("/embeddings", &body, &request_id)?;
        let data = value
            .get("data")
            .cloned()
            .ok_or_else(|| self.endpoint.malformed("missing data"))?;
        let mut items: Vec<EmbeddingItem> = serde_json::from_value(data)
            .map_err(|e| self.endpoint.malformed(format!("data: {e}")))?;
        if items.iter().all(|i| i.index.is_some()) {
            items.sort_by_key(|i| i.index);
        }
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }
}

#[derive(Debug, Clone)]
pub struct HttpImage {
    endpoint: HttpEndpoint,
    capability: ImageCapability,
}

impl HttpImage {
    pub fn new(endpoint: HttpEndpoint, capability: ImageCapability) -> Self {
        Self {
            endpoint,
            capability,
        }
    }
}

impl ImageBackend for HttpImage {
    fn id(&self) -> &str {
        &self.endpoint.id
    }

    fn capability(&self) -> ImageCapability {
        self.capability
    }

    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError> {
        let mut body = json!({
            "model": req.model_id,
            "prompt": req.prompt.text,
            "size": format!("{}x{}", req.width, req.height),
            "width": req.width,
            "height": req.height,
            "response_format": "b64_json",
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let path = match self.capability {
            ImageCapability::TextOnly => "/images/generations",
            ImageCapability::SubjectConditioned => {
                let reference = req.prompt.reference_image.as_ref().ok_or_else(|| {
                    BackendError::CapabilityMismatch {
                        backend: self.endpoint.id.clone(),
                        message: "subject-conditioned request without reference image".into(),
                    }
                })?;
                let bytes = std::fs::read(reference).map_err(|e| BackendError::io(reference, e))?;
                body["reference_image"] =
                    json!(base64::engine::general_purpose::STANDARD.encode(bytes));
                body["subject"] = json!(req.prompt.subject_word);
                "/images/subject"
            }
        };
        let value = self.endpoint.post(path, &body, &req.digest())?;
        let b64 = value
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .ok_or_else(|| self.endpoint.malformed("missing data[0].b64_json"))?;
        base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| self.endpoint.malformed(format!("image payload: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{render_place_prompt, PromptVariant};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned response per queued entry and reports each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((request_line, String::from_utf8(buf).unwrap())).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn endpoint(base_url: String) -> HttpEndpoint {
        HttpEndpoint {
            id: "live".into(),
            base_url,
            model_id: "gpt-3.5-turbo".into(),
            api_key: Some("k".into()),
            timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn chat_request_shape_and_response() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"1. A: x B: y Background: z"}}]}"#.into(),
        )]);
        let chat = HttpChat::new(endpoint(url));
        let p = render_place_prompt("kitchen", PromptVariant::IndirectNoQuestion).unwrap();
        let out = chat.complete(&ChatRequest::new(p, "gpt-3.5-turbo")).unwrap();
        assert_eq!(out, "1. A: x B: y Background: z");
        let (line, body) = rx.recv().unwrap();
        assert!(line.starts_with("POST /v1/chat/completions"));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "gpt-3.5-turbo");
        assert_eq!(v["max_tokens"], 1024);
        assert!(v["messages"][0]["content"].as_str().unwrap().contains("kitchen"));
    }

    #[test]
    fn status_classification() {
        let (url, _rx) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (400, r#"{"error":"bad"}"#.into()),
        ]);
        let chat = HttpChat::new(endpoint(url));
        let p = render_place_prompt("kitchen", PromptVariant::Plain).unwrap();
        let req = ChatRequest::new(p, "m");
        assert!(matches!(chat.complete(&req), Err(BackendError::RateLimited { .. })));
        let e = chat.complete(&req).unwrap_err();
        assert!(matches!(e, BackendError::Transport { .. }) && e.is_retryable());
        let e = chat.complete(&req).unwrap_err();
        assert!(matches!(e, BackendError::Refusal { .. }) && !e.is_retryable());
    }

    #[test]
    fn embeddings_are_reordered_by_index() {
        let (url, _rx) = serve(vec![(
            200,
            r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#.into(),
        )]);
        let emb = HttpEmbedder::new(endpoint(url));
        let v = emb.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn connection_refused_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let emb = HttpEmbedder::new(endpoint(format!("http://{addr}")));
        assert!(emb.embed(&["a".into()]).unwrap_err().is_retryable());
    }
}
