//! Human adjudication: review queue items, decisions and their append-only store.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auditor::AuditFinding;
use crate::detector::{DecisionRecord, FinalVerdict};
use crate::manifest::{DatasetManifest, Sample};
use crate::vqa::ParsePath;

pub const QUEUE_FILE: &str = "queue.json";
pub const REVIEW_LOG_FILE: &str = "review.jsonl";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid decision: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReviewError + '_ {
    move |source| ReviewError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewChoice {
    Keep,
    Remove,
    /// Recorded but never applied; the machine default stands.
    Uncertain,
}

impl ReviewChoice {
    pub fn is_final(self) -> bool {
        !matches!(self, ReviewChoice::Uncertain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub sample_id: String,
    pub decision: ReviewChoice,
    pub reviewer_id: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ReviewDecision {
    pub fn new(sample_id: impl Into<String>, decision: ReviewChoice, reviewer_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            decision,
            reviewer_id: reviewer_id.into(),
            timestamp: Utc::now(),
            note: None,
        }
    }

    fn validate(&self) -> Result<(), ReviewError> {
        if self.sample_id.is_empty() {
            return Err(ReviewError::Invalid("empty sample_id".into()));
        }
        if self.reviewer_id.trim().is_empty() {
            return Err(ReviewError::Invalid("empty reviewer_id".into()));
        }
        Ok(())
    }
}

/// What a reviewer sees for one sample. Ground truth is deliberately absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    pub sample_id: String,
    pub image_ref: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub visual_description: Option<String>,
    #[serde(default)]
    pub machine_verdict: Option<FinalVerdict>,
    #[serde(default)]
    pub parse_path: Option<ParsePath>,
    #[serde(default)]
    pub findings: Vec<AuditFinding>,
}

impl ReviewQueueItem {
    pub fn from_sample(sample: &Sample) -> Self {
        Self {
            sample_id: sample.id.clone(),
            image_ref: sample.image_ref.clone(),
            caption: sample.caption.clone(),
            visual_description: sample.visual_description.clone(),
            machine_verdict: None,
            parse_path: None,
            findings: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub page_size: usize,
    pub items: Vec<ReviewQueueItem>,
}

impl ReviewQueue {
    pub fn new(page_size: usize, items: Vec<ReviewQueueItem>) -> Self {
        Self { page_size: page_size.max(1), items }
    }

    /// Flagged samples of a run (positive or quarantined), in manifest order,
    /// with any audit findings attached.
    pub fn flagged(
        manifest: &DatasetManifest,
        records: &[DecisionRecord],
        findings: &[AuditFinding],
        page_size: usize,
    ) -> Self {
        let by_id: BTreeMap<&str, &DecisionRecord> = records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let mut items = Vec::new();
        for sample in &manifest.samples {
            let Some(record) = by_id.get(sample.id.as_str()) else { continue };
            if !record.verdict.predicts_positive() {
                continue;
            }
            let mut item = ReviewQueueItem::from_sample(sample);
            item.machine_verdict = Some(record.verdict);
            item.parse_path = record.parse_path;
            item.findings = findings.iter().filter(|f| f.sample_id == sample.id).cloned().collect();
            items.push(item);
        }
        Self::new(page_size, items)
    }

    pub fn page_count(&self) -> usize {
        self.items.len().div_ceil(self.page_size)
    }

    pub fn pages(&self) -> impl Iterator<Item = &[ReviewQueueItem]> {
        self.items.chunks(self.page_size)
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.items.iter().any(|i| i.sample_id == sample_id)
    }

    pub fn get(&self, sample_id: &str) -> Option<&ReviewQueueItem> {
        self.items.iter().find(|i| i.sample_id == sample_id)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReviewError> {
        let json = serde_json::to_vec_pretty(self).expect("serializable");
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, ReviewError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| ReviewError::Format { path: path.to_path_buf(), reason: e.to_string() })
    }
}

/// Append-only decision log. Replaying the log rebuilds the latest decision
/// per sample; every earlier decision stays in the history.
pub struct ReviewStore {
    path: PathBuf,
    file: File,
    history: Vec<ReviewDecision>,
    latest: BTreeMap<String, usize>,
}

impl ReviewStore {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io_err(path))?;
        let mut history = Vec::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io_err(path))?;
                if n == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    // torn write from a crash; dropped below
                    break;
                }
                if line.trim().is_empty() {
                    good_len += n as u64;
                    continue;
                }
                let decision: ReviewDecision = serde_json::from_str(&line)
                    .map_err(|e| ReviewError::Format { path: path.to_path_buf(), reason: e.to_string() })?;
                history.push(decision);
                good_len += n as u64;
            }
        }
        if file.metadata().map_err(io_err(path))?.len() > good_len {
            file.set_len(good_len).map_err(io_err(path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        }
        let mut latest = BTreeMap::new();
        for (i, d) in history.iter().enumerate() {
            latest.insert(d.sample_id.clone(), i);
        }
        Ok(Self { path: path.to_path_buf(), file, history, latest })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, decision: ReviewDecision) -> Result<(), ReviewError> {
        decision.validate()?;
        let mut line = serde_json::to_vec(&decision).expect("serializable");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.latest.insert(decision.sample_id.clone(), self.history.len());
        self.history.push(decision);
        Ok(())
    }

    pub fn latest(&self, sample_id: &str) -> Option<&ReviewDecision> {
        self.latest.get(sample_id).map(|&i| &self.history[i])
    }

    /// Latest decision is Keep or Remove.
    pub fn is_decided(&self, sample_id: &str) -> bool {
        self.latest(sample_id).is_some_and(|d| d.decision.is_final())
    }

    pub fn history(&self) -> &[ReviewDecision] {
        &self.history
    }

    pub fn history_for<'a>(&'a self, sample_id: &'a str) -> impl Iterator<Item = &'a ReviewDecision> + 'a {
        self.history.iter().filter(move |d| d.sample_id == sample_id)
    }

    pub fn export(&self) -> Vec<ReviewDecision> {
        self.latest.values().map(|&i| self.history[i].clone()).collect()
    }
}

/// Latest decision per sample, ordered by sample id.
pub fn export_decisions(store: &ReviewStore) -> Vec<ReviewDecision> {
    store.export()
}
