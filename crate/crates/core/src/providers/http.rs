//! JSON-over-HTTP client for the provider contract.
//!
//! Three endpoints, each a `POST` of one JSON object carrying
//! `contract_version`. Transport failures, timeouts and 5xx responses are
//! retried with exponential backoff; 4xx error payloads are returned as
//! [`Error::Provider`] without retrying.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{DetectRequest, Detection, EmbedRequest, EmbeddingVector, GenerationRequest, ImageLocator, Provider};
use crate::error::{Error, Result};

pub const CONTRACT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTransport {
    /// Send the image locator; the server resolves it.
    #[default]
    Uri,
    /// Read the file locally and inline it as base64.
    Base64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub generate_url: Option<String>,
    pub embed_url: Option<String>,
    pub detect_url: Option<String>,
    pub auth_token: Option<String>,
    pub timeout_ms: u64,
    /// Total attempts for retryable failures.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub image_transport: ImageTransport,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            generate_url: None,
            embed_url: None,
            detect_url: None,
            auth_token: None,
            timeout_ms: 60_000,
            max_attempts: 3,
            backoff_ms: 500,
            concurrency: 8,
            image_transport: ImageTransport::Uri,
        }
    }
}

impl HttpConfig {
    /// Overrides fields from `GROUNDPREF_*` environment variables when set.
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = var("GROUNDPREF_GENERATE_URL") {
            self.generate_url = Some(v);
        }
        if let Some(v) = var("GROUNDPREF_EMBED_URL") {
            self.embed_url = Some(v);
        }
        if let Some(v) = var("GROUNDPREF_DETECT_URL") {
            self.detect_url = Some(v);
        }
        if let Some(v) = var("GROUNDPREF_AUTH_TOKEN") {
            self.auth_token = Some(v);
        }
        if let Some(n) = var("GROUNDPREF_CONCURRENCY").and_then(|v| v.parse().ok()) {
            self.concurrency = n;
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpProvider {
    id: String,
    config: HttpConfig,
    agent: ureq::Agent,
    limit: Semaphore,
}

#[derive(Deserialize)]
struct ErrorBody {
    code: String,
    message: String,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!(
            "http:{}|{}|{}",
            config.generate_url.as_deref().unwrap_or("-"),
            config.embed_url.as_deref().unwrap_or("-"),
            config.detect_url.as_deref().unwrap_or("-"),
        );
        Self {
            id,
            limit: Semaphore::new(config.concurrency),
            config,
            agent,
        }
    }

    fn image_json(&self, image: &ImageLocator) -> Result<Value> {
        let reference = match self.config.image_transport {
            ImageTransport::Uri => json!({ "uri": image.uri }),
            ImageTransport::Base64 => {
                let path = image.uri.strip_prefix("file://").unwrap_or(&image.uri);
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                json!({ "base64": base64::engine::general_purpose::STANDARD.encode(bytes) })
            }
        };
        Ok(json!({
            "ref": reference,
            "width": image.width,
            "height": image.height,
        }))
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value> {
        let _permit = self.limit.acquire();
        let mut req = self.agent.post(url);
        if let Some(token) = &self.config.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => Error::Timeout(self.config.timeout_ms),
            other => Error::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: Option<Value> = serde_json::from_str(&text).ok();

        if status >= 500 {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        let value = parsed.ok_or_else(|| Error::Provider {
            code: "invalid_response".into(),
            message: format!("HTTP {status}: body is not JSON"),
        })?;
        if let Some(err) = value.get("error") {
            let body: ErrorBody = serde_json::from_value(err.clone()).unwrap_or_else(|_| ErrorBody {
                code: format!("http_{status}"),
                message: err.to_string(),
            });
            return Err(Error::Provider {
                code: body.code,
                message: body.message,
            });
        }
        if status >= 400 {
            return Err(Error::Provider {
                code: format!("http_{status}"),
                message: text,
            });
        }
        match value.get("contract_version").and_then(Value::as_str) {
            Some(CONTRACT_VERSION) => Ok(value),
            other => Err(Error::Provider {
                code: "contract_mismatch".into(),
                message: format!("expected contract_version {CONTRACT_VERSION}, got {other:?}"),
            }),
        }
    }

    fn post(&self, url: Option<&str>, endpoint: &str, body: Value) -> Result<Value> {
        let url = url.ok_or_else(|| Error::Precondition(format!("no URL configured for /{endpoint}")))?;
        let attempts = self.config.max_attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.post_once(url, &body) {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("/{endpoint} attempt {attempt}/{attempts} failed: {e}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn field<T: for<'de> Deserialize<'de>>(v: &Value, name: &str) -> Result<T> {
    let raw = v.get(name).ok_or_else(|| Error::Provider {
        code: "invalid_response".into(),
        message: format!("missing field `{name}`"),
    })?;
    serde_json::from_value(raw.clone()).map_err(|e| Error::Provider {
        code: "invalid_response".into(),
        message: format!("field `{name}`: {e}"),
    })
}

/// Wire body for `/generate`.
pub fn generate_body(image: Value, req: &GenerationRequest) -> Value {
    json!({
        "contract_version": CONTRACT_VERSION,
        "image": image,
        "crop": req.crop,
        "prompt": req.prompt,
        "object_refs": req.object_refs,
        "sampling": req.sampling,
    })
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        let body = generate_body(self.image_json(&req.image)?, req);
        let resp = self.post(self.config.generate_url.as_deref(), "generate", body)?;
        field(&resp, "text")
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        let body = match req {
            EmbedRequest::Text { text } => json!({
                "contract_version": CONTRACT_VERSION,
                "mode": "text",
                "text": text,
            }),
            EmbedRequest::Crop { image, bbox } | EmbedRequest::Local { image, bbox } => {
                let mode = if matches!(req, EmbedRequest::Crop { .. }) {
                    "crop"
                } else {
                    "local"
                };
                json!({
                    "contract_version": CONTRACT_VERSION,
                    "mode": mode,
                    "image": self.image_json(image)?,
                    "box": bbox,
                })
            }
        };
        let resp = self.post(self.config.embed_url.as_deref(), "embed", body)?;
        let v = EmbeddingVector {
            values: field(&resp, "values")?,
            model: field(&resp, "model")?,
        };
        v.validate()?;
        Ok(v)
    }

    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let body = json!({
            "contract_version": CONTRACT_VERSION,
            "image": self.image_json(&req.image)?,
            "box": req.crop,
            "query": req.query,
            "box_threshold": req.box_threshold,
        });
        let resp = self.post(self.config.detect_url.as_deref(), "detect", body)?;
        field(&resp, "detections")
    }
}
