//! JSON-over-HTTP vision-chat client.
//!
//! `POST {base_url}/v1/vqa` with
//! `{"model", "category", "prompt", "prompt_index", "image_base64" | "image_url"}`;
//! the response body is `{"text": "<generated answer>"}`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{BackendInfo, EndpointConfig, VqaAnswer, VqaBackend, VqaError};
use crate::images::{is_remote, LocalImages};
use crate::manifest::Sample;
use crate::prompts::PromptTemplate;

pub const AUTH_TOKEN_ENV: &str = "KINDERSAFE_BACKEND_TOKEN";
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VqaRequest {
    pub model: String,
    pub category: String,
    pub prompt: String,
    pub prompt_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VqaResponse {
    pub text: String,
}

pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::Client,
    limiter: Arc<Semaphore>,
    images: LocalImages,
}

enum Attempt {
    Done(String),
    Retry(VqaError),
    Fatal(VqaError),
}

impl HttpBackend {
    pub fn new(config: EndpointConfig, images: LocalImages) -> Result<Self, VqaError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| VqaError::InvalidConfig(e.to_string()))?;
        let limiter = Arc::new(Semaphore::new(config.max_concurrency));
        Ok(Self { config, client, limiter, images })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/vqa", self.config.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_ms.saturating_mul(1u64 << attempt.min(16));
        let jitter = if self.config.backoff_ms > 0 {
            rand::rng().random_range(0..self.config.backoff_ms)
        } else {
            0
        };
        Duration::from_millis(base.saturating_add(jitter)).min(MAX_BACKOFF)
    }

    async fn attempt(&self, body: &VqaRequest) -> Attempt {
        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(VqaError::Timeout { attempts: 0 }),
            Err(e) => return Attempt::Retry(VqaError::Transport { attempts: 0, message: e.to_string() }),
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(VqaError::Timeout { attempts: 0 }),
            Err(e) => return Attempt::Retry(VqaError::Transport { attempts: 0, message: e.to_string() }),
        };
        if status.is_server_error() {
            return Attempt::Retry(VqaError::Transport {
                attempts: 0,
                message: format!("HTTP {}: {}", status.as_u16(), truncate(&text)),
            });
        }
        if !status.is_success() {
            return Attempt::Fatal(VqaError::BackendRejection { status: status.as_u16(), body: text });
        }
        match serde_json::from_str::<VqaResponse>(&text) {
            Ok(r) => Attempt::Done(r.text),
            Err(e) => Attempt::Fatal(VqaError::MalformedResponse(format!("{e}: {}", truncate(&text)))),
        }
    }

    async fn send(&self, body: VqaRequest) -> Result<VqaAnswer, VqaError> {
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body).await {
                Attempt::Done(raw_text) => {
                    return Ok(VqaAnswer {
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempts,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempts > self.config.max_retries {
                        return Err(match e {
                            VqaError::Timeout { .. } => VqaError::Timeout { attempts },
                            VqaError::Transport { message, .. } => VqaError::Transport { attempts, message },
                            other => other,
                        });
                    }
                    tracing::debug!(attempt = attempts, error = %e, "retrying vqa request");
                    tokio::time::sleep(self.backoff(attempts - 1)).await;
                }
            }
        }
    }

    fn request(&self, prompt: &PromptTemplate) -> VqaRequest {
        VqaRequest {
            model: self.config.model_name.clone(),
            category: self.config.category.as_str().to_string(),
            prompt: prompt.text.clone(),
            prompt_index: prompt.index,
            image_base64: None,
            image_url: None,
        }
    }

    /// Ask about raw image bytes.
    pub async fn ask_bytes(&self, image: &[u8], prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError> {
        let mut body = self.request(prompt);
        body.image_base64 = Some(base64::engine::general_purpose::STANDARD.encode(image));
        self.send(body).await
    }
}

fn truncate(text: &str) -> String {
    const LIMIT: usize = 512;
    match text.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}…", &text[..i]),
        None => text.to_string(),
    }
}

#[async_trait]
impl VqaBackend for HttpBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "http".into(),
            model_name: self.config.model_name.clone(),
            category: self.config.category,
            fingerprint: serde_json::json!({
                "base_url": self.config.base_url,
                "model": self.config.model_name,
                "category": self.config.category,
            }),
        }
    }

    async fn ask(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError> {
        if is_remote(&sample.image_ref) {
            let mut body = self.request(prompt);
            body.image_url = Some(sample.image_ref.clone());
            return self.send(body).await;
        }
        let bytes = self.images.read(&sample.image_ref).map_err(|e| VqaError::ImageUnreadable {
            image_ref: sample.image_ref.clone(),
            reason: e.to_string(),
        })?;
        self.ask_bytes(&bytes, prompt).await
    }
}
