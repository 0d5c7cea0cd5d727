use std::collections::HashMap;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::{is_remote, LocalImages};
use crate::manifest::Sample;
use crate::vqa::EndpointConfig;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("image {0:?} unreadable: {1}")]
    ImageUnreadable(String, String),
    #[error("score {0} outside [0,1]")]
    OutOfRange(f64),
}

/// Image-caption agreement in [0,1]. Implementations must be callable
/// from several threads at once.
pub trait ImageTextScorer: Sync {
    fn score(&self, sample: &Sample, caption: &str) -> Result<f64, ScorerError>;
}

/// Same score for everything.
pub struct ConstantScorer(pub f64);

impl ImageTextScorer for ConstantScorer {
    fn score(&self, _sample: &Sample, _caption: &str) -> Result<f64, ScorerError> {
        Ok(self.0)
    }
}

/// Fixed per-id scores; unknown ids score `fallback`.
pub struct TableScorer {
    pub scores: HashMap<String, f64>,
    pub fallback: f64,
}

impl ImageTextScorer for TableScorer {
    fn score(&self, sample: &Sample, _caption: &str) -> Result<f64, ScorerError> {
        Ok(self.scores.get(&sample.id).copied().unwrap_or(self.fallback))
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_base64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_url: Option<&'a str>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// `POST {base_url}/v1/similarity` with `{"model","text","image_base64"|"image_url"}`,
/// answered by `{"score": <0..1>}`.
pub struct HttpScorer {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    images: LocalImages,
}

impl HttpScorer {
    pub fn new(config: EndpointConfig, images: LocalImages) -> Result<Self, ScorerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        Ok(Self { config, client, images })
    }

    fn post_once(&self, body: &ScoreRequest<'_>) -> Result<f64, (bool, ScorerError)> {
        let url = format!("{}/v1/similarity", self.config.base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| (true, ScorerError::Unavailable(e.to_string())))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err((true, ScorerError::Unavailable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err((false, ScorerError::Unavailable(format!("HTTP {status}"))));
        }
        let parsed: ScoreResponse = resp.json().map_err(|e| (false, ScorerError::Unavailable(e.to_string())))?;
        Ok(parsed.score)
    }
}

impl ImageTextScorer for HttpScorer {
    fn score(&self, sample: &Sample, caption: &str) -> Result<f64, ScorerError> {
        let mut body = ScoreRequest { model: &self.config.model_name, text: caption, image_base64: None, image_url: None };
        if is_remote(&sample.image_ref) {
            body.image_url = Some(&sample.image_ref);
        } else {
            let bytes = self
                .images
                .read(&sample.image_ref)
                .map_err(|e| ScorerError::ImageUnreadable(sample.image_ref.clone(), e.to_string()))?;
            body.image_base64 = Some(base64::engine::general_purpose::STANDARD.encode(bytes));
        }
        let mut attempt = 0;
        loop {
            match self.post_once(&body) {
                Ok(score) => return Ok(score),
                Err((retryable, e)) => {
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(e);
                    }
                    std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt.min(10)));
                    attempt += 1;
                }
            }
        }
    }
}
