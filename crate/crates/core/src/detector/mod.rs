//! Zero-shot child detection over a manifest, with a resumable decision log.

mod log;
mod removal;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::{DatasetManifest, Sample};
use crate::prompts::{PromptError, PromptRegistry, PromptTemplate};
use crate::vqa::{parse_binary, Category, ParsePath, Verdict, VqaBackend, VqaError};

pub use log::{latest_by_sample, read_log, DecisionLog, LogHeader, RunLock, DECISIONS_FILE};
pub use removal::{build_removal_manifest, AppliedOverride, RemovalManifest};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory is locked by another process ({0})")]
    RunLocked(PathBuf),
    #[error("{dir} holds run {found}, not {expected}; use a fresh output directory")]
    RunMismatch { dir: PathBuf, found: String, expected: String },
    #[error("{path}:{line}: corrupt decision log: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("backend down after {consecutive_failures} consecutive failures ({completed} decided, {pending} pending): {last_error}")]
    BackendDown { completed: usize, pending: usize, consecutive_failures: usize, last_error: String },
    #[error("override for {0:?} does not match any decision in the run")]
    DanglingOverride(String),
}

impl DetectorError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalVerdict {
    Positive,
    Negative,
    /// The answer could not be interpreted. Treated as positive downstream.
    Quarantined,
}

impl From<Verdict> for FinalVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Positive => FinalVerdict::Positive,
            Verdict::Negative => FinalVerdict::Negative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub run_id: String,
    pub sample_id: String,
    pub verdict: FinalVerdict,
    pub prompt_index: u32,
    pub model_name: String,
    pub category: Category,
    #[serde(default)]
    pub raw_answer: Option<String>,
    #[serde(default)]
    pub parse_path: Option<ParsePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub timestamp: DateTime<Utc>,
}

impl DecisionRecord {
    /// Equal apart from timing fields.
    pub fn same_decision(&self, other: &DecisionRecord) -> bool {
        self.run_id == other.run_id
            && self.sample_id == other.sample_id
            && self.verdict == other.verdict
            && self.prompt_index == other.prompt_index
            && self.model_name == other.model_name
            && self.category == other.category
            && self.raw_answer == other.raw_answer
            && self.parse_path == other.parse_path
            && self.error == other.error
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuarantinePolicy {
    #[default]
    Remove,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub prompt_index: u32,
    #[serde(default)]
    pub quarantine: QuarantinePolicy,
    /// Requests kept in flight at once.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Stop after this many new decisions.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "default_failure_budget")]
    pub max_consecutive_backend_failures: usize,
}

fn default_in_flight() -> usize {
    16
}

fn default_failure_budget() -> usize {
    10
}

impl RunConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            prompt_index: crate::prompts::DEFAULT_PROMPT,
            quarantine: QuarantinePolicy::Remove,
            max_in_flight: default_in_flight(),
            limit: None,
            max_consecutive_backend_failures: default_failure_budget(),
        }
    }

    fn validate(&self) -> Result<(), DetectorError> {
        if self.max_in_flight == 0 {
            return Err(DetectorError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        if self.max_consecutive_backend_failures == 0 {
            return Err(DetectorError::InvalidConfig("max_consecutive_backend_failures must be >= 1".into()));
        }
        Ok(())
    }
}

/// Identifies a run: same prompt, backend and manifest give the same id.
pub fn run_id(prompt: &PromptTemplate, backend: &dyn VqaBackend, manifest_digest: &str) -> (String, serde_json::Value) {
    let snapshot = serde_json::json!({
        "prompt_index": prompt.index,
        "prompt_text": prompt.text,
        "backend": backend.info(),
        "manifest_digest": manifest_digest,
    });
    let digest = Sha256::digest(serde_json::to_vec(&snapshot).expect("serializable"));
    (crate::manifest::hex(&digest[..8]), snapshot)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub run_id: String,
    /// One record per decided sample, in manifest order.
    pub records: Vec<DecisionRecord>,
    pub resumed: usize,
    pub newly_decided: usize,
    /// Samples without a decision (only when `limit` stopped the run).
    pub pending: Vec<String>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.pending.is_empty()
    }
}

fn record_for(run_id: &str, sample: &Sample, prompt: &PromptTemplate, backend_model: &str, category: Category, result: Result<crate::vqa::VqaAnswer, VqaError>) -> DecisionRecord {
    let mut record = DecisionRecord {
        run_id: run_id.to_string(),
        sample_id: sample.id.clone(),
        verdict: FinalVerdict::Quarantined,
        prompt_index: prompt.index,
        model_name: backend_model.to_string(),
        category,
        raw_answer: None,
        parse_path: None,
        error: None,
        latency_ms: 0,
        attempt_count: 0,
        timestamp: Utc::now(),
    };
    match result {
        Ok(answer) => {
            record.latency_ms = answer.latency_ms;
            record.attempt_count = answer.attempt_count;
            match parse_binary(&answer) {
                Ok(v) => {
                    record.verdict = v.value.into();
                    record.parse_path = Some(v.parse_path);
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            record.raw_answer = Some(answer.raw_text);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Classifies every sample not already decided in `config.out_dir`.
///
/// Decisions are appended to the run's log as they arrive. Timeouts and
/// transport failures leave the sample undecided; too many in a row aborts
/// with [`DetectorError::BackendDown`] and a later call resumes the run.
pub async fn classify_manifest(
    manifest: &DatasetManifest,
    registry: &PromptRegistry,
    backend: &dyn VqaBackend,
    config: &RunConfig,
) -> Result<RunOutcome, DetectorError> {
    config.validate()?;
    let prompt = registry.get_prompt(config.prompt_index)?;
    let info = backend.info();
    let (run_id, snapshot) = run_id(prompt, backend, &manifest.digest());
    let header = LogHeader { run_id: run_id.clone(), manifest_digest: manifest.digest(), config: snapshot };
    let (mut log, prior) = DecisionLog::open(&config.out_dir, &header)?;
    let mut decided = latest_by_sample(prior);
    let resumed = decided.len();

    let todo: Vec<&Sample> = manifest.samples.iter().filter(|s| !decided.contains_key(&s.id)).collect();
    let budget = config.limit.unwrap_or(usize::MAX);
    let mut newly_decided = 0usize;
    let mut consecutive = 0usize;
    let mut last_error = String::new();
    let mut aborted = false;

    {
        let mut answers = futures::stream::iter(todo.iter().take(budget).copied())
            .map(|sample| async move { (sample, backend.ask(sample, prompt).await) })
            .buffer_unordered(config.max_in_flight);
        while let Some((sample, result)) = answers.next().await {
            if let Err(e) = &result {
                if e.is_backend_failure() {
                    consecutive += 1;
                    last_error = e.to_string();
                    tracing::warn!(sample = %sample.id, error = %e, "backend failure");
                    if consecutive >= config.max_consecutive_backend_failures {
                        aborted = true;
                        break;
                    }
                    continue;
                }
            }
            consecutive = 0;
            let record = record_for(&run_id, sample, prompt, &info.model_name, info.category, result);
            log.append(&record)?;
            decided.insert(record.sample_id.clone(), record);
            newly_decided += 1;
        }
    }
    log.sync()?;

    let mut records = Vec::with_capacity(manifest.len());
    let mut pending = Vec::new();
    for s in &manifest.samples {
        match decided.remove(&s.id) {
            Some(r) => records.push(r),
            None => pending.push(s.id.clone()),
        }
    }
    if aborted || (config.limit.is_none() && !pending.is_empty()) {
        return Err(DetectorError::BackendDown {
            completed: records.len(),
            pending: pending.len(),
            consecutive_failures: consecutive,
            last_error,
        });
    }
    Ok(RunOutcome { run_id, records, resumed, newly_decided, pending })
}

/// Records of a finished or interrupted run, one per sample id.
pub fn load_decisions(dir: &Path) -> Result<(Option<LogHeader>, Vec<DecisionRecord>), DetectorError> {
    let (header, records, _) = read_log(&dir.join(DECISIONS_FILE))?;
    Ok((header, latest_by_sample(records).into_values().collect()))
}

/// Count of verdicts by kind.
pub fn verdict_counts(records: &[DecisionRecord]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        let key = match r.verdict {
            FinalVerdict::Positive => "positive",
            FinalVerdict::Negative => "negative",
            FinalVerdict::Quarantined => "quarantined",
        };
        *out.entry(key).or_insert(0) += 1;
    }
    out
}
