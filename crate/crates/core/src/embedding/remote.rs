//! HTTP client for the embedding service.
//!
//! Wire format (JSON):
//!
//! ```text
//! GET  /v1/models        -> [{"model": "...", "dim": 512, "modalities": ["image", "text"]}, ...]
//! POST /v1/embed/image   {"modality": "image", "payload": "<base64 png>", "model": "..."}
//! POST /v1/embed/text    {"modality": "text", "payload": "<utf-8 text>", "model": "..."}
//!                        -> {"embedding": [...], "model": "...", "dim": 512}
//! POST /v1/embed/batch   {"items": [<request>, ...]} -> {"items": [<response>, ...]}
//! ```
//!
//! Transport failures and 5xx responses are retried with exponential backoff;
//! 4xx responses fail immediately.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedder, EmbedderDescriptor, Embedding};
use crate::behavior::BehaviorImage;

pub const EMBED_URL_VAR: &str = "EE_EMBED_URL";
const BATCH_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub url: String,
    pub model: String,
    pub attempts: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub batch: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            model: "clip".into(),
            attempts: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            batch: true,
        }
    }
}

impl RemoteConfig {
    /// Default config with the URL taken from `EE_EMBED_URL` when set.
    pub fn from_env(model: &str) -> Self {
        let mut config = Self { model: model.to_string(), ..Self::default() };
        if let Ok(url) = std::env::var(EMBED_URL_VAR) {
            config.url = url;
        }
        config
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    modality: &'static str,
    payload: String,
    model: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
    #[serde(default)]
    dim: Option<usize>,
}

#[derive(Debug, Serialize)]
struct BatchRequest<'a> {
    items: Vec<EmbedRequest<'a>>,
}

#[derive(Debug, Deserialize)]
struct BatchResponse {
    items: Vec<EmbedResponse>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelInfo {
    pub model: String,
    pub dim: usize,
    pub modalities: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModelList {
    Bare(Vec<ModelInfo>),
    Wrapped { models: Vec<ModelInfo> },
}

enum Failure {
    Retry(String),
    Fatal(EmbedError),
}

pub struct RemoteEmbedder {
    config: RemoteConfig,
    agent: ureq::Agent,
    descriptor: EmbedderDescriptor,
    batch_available: AtomicBool,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("config", &self.config)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl RemoteEmbedder {
    /// Queries `/v1/models` and validates that the configured model is served.
    pub fn connect(config: RemoteConfig) -> Result<Self, EmbedError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            descriptor: EmbedderDescriptor {
                backend_id: String::new(),
                dim: 0,
                image: false,
                text: false,
            },
            batch_available: AtomicBool::new(config.batch),
            agent,
            config,
        };
        let models: ModelList = client.with_retry(|c| c.get_json("/v1/models"))?;
        let models = match models {
            ModelList::Bare(m) | ModelList::Wrapped { models: m } => m,
        };
        let info = models
            .into_iter()
            .find(|m| m.model == client.config.model)
            .ok_or_else(|| {
                EmbedError::Protocol(format!("model {:?} is not served", client.config.model))
            })?;
        if info.dim == 0 {
            return Err(EmbedError::Protocol("model advertises dim 0".into()));
        }
        client.descriptor = EmbedderDescriptor {
            backend_id: info.model.clone(),
            dim: info.dim,
            image: info.modalities.iter().any(|m| m == "image"),
            text: info.modalities.iter().any(|m| m == "text"),
        };
        Ok(client)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.url.trim_end_matches('/'), path)
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, Failure> {
        let resp = self
            .agent
            .get(&self.url(path))
            .call()
            .map_err(|e| Failure::Retry(e.to_string()))?;
        read_response(resp)
    }

    fn post_json<B: Serialize, T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, Failure> {
        let resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        read_response(resp)
    }

    fn with_retry<T>(&self, f: impl Fn(&Self) -> Result<T, Failure>) -> Result<T, EmbedError> {
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match f(self) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => {
                    log::warn!("embedding request failed (attempt {}/{attempts}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(EmbedError::Unreachable { attempts, message: last })
    }

    fn finish(&self, resp: EmbedResponse) -> Result<Embedding, EmbedError> {
        let dim = self.descriptor.dim;
        if resp.embedding.len() != dim || resp.dim.is_some_and(|d| d != dim) {
            return Err(EmbedError::DimensionMismatch { expected: dim, actual: resp.embedding.len() });
        }
        // Services often compute in float32; renormalize in f64.
        Embedding::normalized(self.descriptor.backend_id.as_str(), resp.embedding)
    }

    fn image_request(&self, image: &BehaviorImage) -> Result<EmbedRequest<'_>, EmbedError> {
        if !self.descriptor.image {
            return Err(EmbedError::Unsupported(self.descriptor.backend_id.clone(), "image"));
        }
        Ok(EmbedRequest {
            modality: "image",
            payload: base64::engine::general_purpose::STANDARD.encode(image.to_png()?),
            model: &self.config.model,
        })
    }
}

fn read_response<T: serde::de::DeserializeOwned>(
    resp: ureq::http::Response<ureq::Body>,
) -> Result<T, Failure> {
    let status = resp.status().as_u16();
    let mut body = resp.into_body();
    let text = body.read_to_string().map_err(|e| Failure::Retry(e.to_string()))?;
    match status {
        200..=299 => serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(EmbedError::Protocol(format!("bad response body: {e}")))),
        500..=599 => Err(Failure::Retry(format!("status {status}: {text}"))),
        _ => Err(Failure::Fatal(EmbedError::Protocol(format!("status {status}: {text}")))),
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError> {
        let req = self.image_request(image)?;
        let resp = self.with_retry(|c| c.post_json("/v1/embed/image", &req))?;
        self.finish(resp)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        if !self.descriptor.text {
            return Err(EmbedError::Unsupported(self.descriptor.backend_id.clone(), "text"));
        }
        let req = EmbedRequest { modality: "text", payload: text.to_string(), model: &self.config.model };
        let resp = self.with_retry(|c| c.post_json("/v1/embed/text", &req))?;
        self.finish(resp)
    }

    fn embed_images(&self, images: &[&BehaviorImage]) -> Result<Vec<Embedding>, EmbedError> {
        if images.len() <= 1 || !self.batch_available.load(Ordering::Relaxed) {
            return images.iter().map(|img| self.embed_image(img)).collect();
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH_LIMIT) {
            let body = BatchRequest {
                items: chunk.iter().map(|img| self.image_request(img)).collect::<Result<_, _>>()?,
            };
            match self.with_retry(|c| c.post_json::<_, BatchResponse>("/v1/embed/batch", &body)) {
                Ok(resp) => {
                    if resp.items.len() != chunk.len() {
                        return Err(EmbedError::Protocol(format!(
                            "batch returned {} items for {} inputs",
                            resp.items.len(),
                            chunk.len()
                        )));
                    }
                    for item in resp.items {
                        out.push(self.finish(item)?);
                    }
                }
                Err(EmbedError::Protocol(msg)) if msg.starts_with("status 404") => {
                    log::info!("embedding service has no batch endpoint; sending single requests");
                    self.batch_available.store(false, Ordering::Relaxed);
                    for img in chunk {
                        out.push(self.embed_image(img)?);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}
