use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendInfo, Category, VqaAnswer, VqaBackend, VqaError};
use crate::manifest::{ChildPresence, Sample};
use crate::prompts::PromptTemplate;

pub const VERBOSE_POSITIVE: &str = "Yes, there is a child in the picture, specifically a baby or a toddler.";
pub const VERBOSE_NEGATIVE: &str = "No, there are no children in the picture.";

/// Seeded stand-in for a served model: answers from ground truth with
/// configurable error rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockBackendConfig {
    /// Probability that a child image is answered "No".
    #[serde(default)]
    pub miss_rate: f64,
    /// Probability that a non-child image is answered "Yes".
    #[serde(default)]
    pub false_alarm_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability of a full sentence instead of a bare token.
    #[serde(default)]
    pub verbose_fraction: f64,
    /// Reported (not slept) latency per answer.
    #[serde(default)]
    pub latency_ms: u64,
}

impl Default for MockBackendConfig {
    fn default() -> Self {
        Self { miss_rate: 0.0, false_alarm_rate: 0.0, seed: 0, verbose_fraction: 0.0, latency_ms: 0 }
    }
}

impl MockBackendConfig {
    pub fn new(miss_rate: f64, false_alarm_rate: f64, seed: u64) -> Self {
        Self { miss_rate, false_alarm_rate, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), VqaError> {
        for (name, v) in [
            ("miss_rate", self.miss_rate),
            ("false_alarm_rate", self.false_alarm_rate),
            ("verbose_fraction", self.verbose_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(VqaError::InvalidConfig(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Uniform draw in [0,1) from (seed, stream, id); identical inputs give
/// identical draws regardless of call order.
pub(crate) fn unit_draw(seed: u64, stream: &str, id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(b"kindersafe-mock\0");
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    let digest = h.finalize();
    let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

pub fn mock_ask(sample: &Sample, _prompt: &PromptTemplate, config: &MockBackendConfig) -> Result<VqaAnswer, VqaError> {
    let truth = match sample.ground_truth {
        ChildPresence::Positive => true,
        ChildPresence::Negative => false,
        ChildPresence::Unknown => return Err(VqaError::UnknownGroundTruth(sample.id.clone())),
    };
    let flip_rate = if truth { config.miss_rate } else { config.false_alarm_rate };
    let flipped = unit_draw(config.seed, "flip", &sample.id) < flip_rate;
    let says_child = truth != flipped;
    let verbose = unit_draw(config.seed, "verbose", &sample.id) < config.verbose_fraction;
    let raw_text = match (says_child, verbose) {
        (true, false) => "Yes",
        (false, false) => "No",
        (true, true) => VERBOSE_POSITIVE,
        (false, true) => VERBOSE_NEGATIVE,
    };
    Ok(VqaAnswer { raw_text: raw_text.to_string(), latency_ms: config.latency_ms, attempt_count: 1 })
}

#[derive(Clone, Debug)]
pub struct MockBackend {
    config: MockBackendConfig,
    model_name: String,
    category: Category,
}

impl MockBackend {
    pub fn new(config: MockBackendConfig) -> Result<Self, VqaError> {
        config.validate()?;
        Ok(Self { config, model_name: "mock".into(), category: Category::Detailed })
    }

    /// Report answers under a served model's name, e.g. for sweep tables.
    pub fn named(mut self, model_name: impl Into<String>, category: Category) -> Self {
        self.model_name = model_name.into();
        self.category = category;
        self
    }

    pub fn config(&self) -> &MockBackendConfig {
        &self.config
    }
}

#[async_trait]
impl VqaBackend for MockBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "mock".into(),
            model_name: self.model_name.clone(),
            category: self.category,
            fingerprint: serde_json::to_value(&self.config).expect("serializable"),
        }
    }

    async fn ask(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError> {
        mock_ask(sample, prompt, &self.config)
    }
}
