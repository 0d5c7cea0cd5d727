//! Vision-question-answering backends and answer parsing.
//!
//! A backend turns `(image, prompt)` into raw answer text; [`parse_binary`]
//! turns that text into a [`BinaryVerdict`]. Backends are either the HTTP
//! client in [`http`] or the seeded [`MockBackend`].

pub mod http;
mod mock;
mod parse;

use std::fmt;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Sample;
use crate::prompts::PromptTemplate;

pub use http::{HttpBackend, AUTH_TOKEN_ENV};
pub use mock::{mock_ask, MockBackend, MockBackendConfig, VERBOSE_NEGATIVE, VERBOSE_POSITIVE};
pub use parse::{parse_binary, parse_text, ParseError};

/// Operational category passed through to the serving side unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "complex")]
    Complex,
    #[serde(rename = "conv", alias = "conversational")]
    Conversational,
    #[serde(rename = "detail", alias = "detailed")]
    Detailed,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Complex, Category::Conversational, Category::Detailed];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Complex => "complex",
            Category::Conversational => "conv",
            Category::Detailed => "detail",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "complex" => Ok(Category::Complex),
            "conv" | "conversational" | "conversation" => Ok(Category::Conversational),
            "detail" | "detailed" => Ok(Category::Detailed),
            other => Err(format!("unknown category {other:?} (expected complex, conv or detail)")),
        }
    }
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_concurrency() -> usize {
    4
}

fn default_backoff_ms() -> u64 {
    250
}

#[derive(Clone, Serialize, Deserialize, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub category: Category,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    /// First retry delay; doubles per attempt, plus jitter.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(skip)]
    pub auth_token: Option<String>,
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("category", &self.category)
            .field("timeout_ms", &self.timeout_ms)
            .field("max_retries", &self.max_retries)
            .field("max_concurrency", &self.max_concurrency)
            .field("backoff_ms", &self.backoff_ms)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>, category: Category) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            category,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_concurrency: default_max_concurrency(),
            backoff_ms: default_backoff_ms(),
            auth_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), VqaError> {
        if self.max_concurrency < 1 {
            return Err(VqaError::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(VqaError::InvalidConfig("timeout_ms must be > 0".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(VqaError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    ExactToken,
    LeadingToken,
    VerboseHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryVerdict {
    pub value: Verdict,
    pub parse_path: ParsePath,
}

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend rejected request with HTTP {status}: {body}")]
    BackendRejection { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("image {image_ref:?} unreadable: {reason}")]
    ImageUnreadable { image_ref: String, reason: String },
    #[error("sample {0:?} has unknown ground truth")]
    UnknownGroundTruth(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

impl VqaError {
    /// Failures that say nothing about the sample itself: the sample stays
    /// pending rather than being quarantined.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, VqaError::Timeout { .. } | VqaError::Transport { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// `mock` or `http`.
    pub kind: String,
    pub model_name: String,
    pub category: Category,
    /// Stable description of everything that affects answers; part of the run id.
    pub fingerprint: serde_json::Value,
}

#[async_trait]
pub trait VqaBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    async fn ask(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError>;
}
