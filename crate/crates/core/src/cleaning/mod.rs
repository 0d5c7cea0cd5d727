//! Pre-filtering of noisy datasets: near-duplicate removal and image-caption
//! similarity filtering.
//!
//! Samples that cannot be processed go to a quarantine list in the report;
//! nothing is dropped without a trace. Every input id ends up in exactly one
//! of: the output manifest, `removed_duplicates`, `removed_low_similarity`,
//! `quarantined`.

mod cluster;
mod phash;
mod scorer;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::LocalImages;
use crate::manifest::{DatasetManifest, Sample};
use crate::vqa::EndpointConfig;

pub use phash::PerceptualHash;
pub use scorer::{ConstantScorer, HttpScorer, ImageTextScorer, ScorerError, TableScorer};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.2;
pub const DEFAULT_HAMMING_THRESHOLD: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub similarity_threshold: f64,
    pub hamming_threshold: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_backend: Option<EndpointConfig>,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            hamming_threshold: DEFAULT_HAMMING_THRESHOLD,
            embedding_backend: None,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), CleaningError> {
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(CleaningError::InvalidConfig(format!(
                "similarity_threshold {} outside [0,1]",
                self.similarity_threshold
            )));
        }
        if self.hamming_threshold > 64 {
            return Err(CleaningError::InvalidConfig(format!(
                "hamming_threshold {} outside [0,64]",
                self.hamming_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CleaningError {
    #[error("invalid cleaning configuration: {0}")]
    InvalidConfig(String),
    /// Scores computed before the failure are returned so a rerun can pick
    /// up where this one stopped.
    #[error("image-text scorer unavailable: {reason}")]
    ScorerUnavailable { reason: String, scored: BTreeMap<String, f64> },
    #[error("scorer returned {score} for {id:?}, outside [0,1]")]
    ScoreOutOfRange { id: String, score: f64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub kept_id: String,
    pub removed_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowSimilarity {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub removed_duplicates: Vec<DuplicateGroup>,
    pub removed_low_similarity: Vec<LowSimilarity>,
    pub quarantined: Vec<QuarantineEntry>,
    /// Kept without scoring because there was no caption.
    pub captionless: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub kept_count: usize,
    pub removed_count: usize,
}

impl CleaningReport {
    /// Report of `first` followed by `second` on its output.
    pub fn then(mut self, second: CleaningReport) -> CleaningReport {
        self.removed_duplicates.extend(second.removed_duplicates);
        self.removed_low_similarity.extend(second.removed_low_similarity);
        self.quarantined.extend(second.quarantined);
        self.captionless = second.captionless;
        self.scores.extend(second.scores);
        self.kept_count = second.kept_count;
        self.removed_count += second.removed_count;
        self
    }
}

/// Source of perceptual hashes for samples.
pub trait ImageHasher: Sync {
    fn hash(&self, sample: &Sample) -> Result<PerceptualHash, String>;
}

impl ImageHasher for LocalImages {
    fn hash(&self, sample: &Sample) -> Result<PerceptualHash, String> {
        let bytes = self.read(&sample.image_ref).map_err(|e| e.to_string())?;
        PerceptualHash::from_image_bytes(&bytes).map_err(|e| e.to_string())
    }
}

/// Hashes supplied up front, keyed by sample id.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedHashes(pub HashMap<String, PerceptualHash>);

impl ImageHasher for PrecomputedHashes {
    fn hash(&self, sample: &Sample) -> Result<PerceptualHash, String> {
        self.0.get(&sample.id).copied().ok_or_else(|| format!("no hash for {}", sample.id))
    }
}

pub fn dedup(
    manifest: &DatasetManifest,
    config: &CleaningConfig,
    hasher: &dyn ImageHasher,
) -> Result<(DatasetManifest, CleaningReport), CleaningError> {
    config.validate()?;
    let hashed: Vec<Result<PerceptualHash, String>> =
        manifest.samples.par_iter().map(|s| hasher.hash(s)).collect();

    let mut report = CleaningReport::default();
    let mut positions = Vec::new();
    let mut hashes = Vec::new();
    for (pos, (sample, h)) in manifest.samples.iter().zip(hashed).enumerate() {
        match h {
            Ok(h) => {
                positions.push(pos);
                hashes.push(h);
            }
            Err(reason) => report.quarantined.push(QuarantineEntry { id: sample.id.clone(), reason }),
        }
    }
    report.quarantined.sort_by(|a, b| a.id.cmp(&b.id));

    let labels = cluster::components(&hashes, config.hamming_threshold);
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (slot, &label) in labels.iter().enumerate() {
        groups.entry(label).or_default().push(&manifest.samples[positions[slot]].id);
    }
    let mut keep = std::collections::HashSet::new();
    for mut members in groups.into_values() {
        members.sort_unstable();
        keep.insert(members[0]);
        if members.len() > 1 {
            report.removed_duplicates.push(DuplicateGroup {
                kept_id: members[0].to_string(),
                removed_ids: members[1..].iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    report.removed_duplicates.sort_by(|a, b| a.kept_id.cmp(&b.kept_id));

    let kept: Vec<Sample> = manifest.samples.iter().filter(|s| keep.contains(s.id.as_str())).cloned().collect();
    report.kept_count = kept.len();
    report.removed_count = manifest.len() - kept.len();
    Ok((manifest.with_samples(kept), report))
}

pub fn similarity_filter(
    manifest: &DatasetManifest,
    config: &CleaningConfig,
    scorer: &dyn ImageTextScorer,
) -> Result<(DatasetManifest, CleaningReport), CleaningError> {
    similarity_filter_resuming(manifest, config, scorer, &BTreeMap::new())
}

enum Scored {
    Captionless,
    Score(f64),
    Quarantine(String),
    Unavailable(String),
    OutOfRange(f64),
}

/// Like [`similarity_filter`], reusing `prior` scores from an interrupted run.
pub fn similarity_filter_resuming(
    manifest: &DatasetManifest,
    config: &CleaningConfig,
    scorer: &dyn ImageTextScorer,
    prior: &BTreeMap<String, f64>,
) -> Result<(DatasetManifest, CleaningReport), CleaningError> {
    config.validate()?;
    let outcomes: Vec<Scored> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let Some(caption) = s.caption.as_deref().filter(|c| !c.trim().is_empty()) else {
                return Scored::Captionless;
            };
            if let Some(&score) = prior.get(&s.id) {
                return Scored::Score(score);
            }
            match scorer.score(s, caption) {
                Ok(v) if (0.0..=1.0).contains(&v) => Scored::Score(v),
                Ok(v) => Scored::OutOfRange(v),
                Err(ScorerError::ImageUnreadable(_, reason)) => Scored::Quarantine(reason),
                Err(ScorerError::OutOfRange(v)) => Scored::OutOfRange(v),
                Err(ScorerError::Unavailable(reason)) => Scored::Unavailable(reason),
            }
        })
        .collect();

    let mut report = CleaningReport::default();
    let mut failure = None;
    let mut kept = Vec::new();
    for (sample, outcome) in manifest.samples.iter().zip(outcomes) {
        match outcome {
            Scored::Captionless => {
                report.captionless.push(sample.id.clone());
                kept.push(sample.clone());
            }
            Scored::Score(score) => {
                report.scores.insert(sample.id.clone(), score);
                if score < config.similarity_threshold {
                    report.removed_low_similarity.push(LowSimilarity { id: sample.id.clone(), score });
                } else {
                    kept.push(sample.clone());
                }
            }
            Scored::Quarantine(reason) => {
                report.quarantined.push(QuarantineEntry { id: sample.id.clone(), reason })
            }
            Scored::OutOfRange(score) => {
                return Err(CleaningError::ScoreOutOfRange { id: sample.id.clone(), score })
            }
            Scored::Unavailable(reason) => {
                failure.get_or_insert(reason);
            }
        }
    }
    if let Some(reason) = failure {
        return Err(CleaningError::ScorerUnavailable { reason, scored: report.scores });
    }
    report.quarantined.sort_by(|a, b| a.id.cmp(&b.id));
    report.kept_count = kept.len();
    report.removed_count = manifest.len() - kept.len();
    Ok((manifest.with_samples(kept), report))
}
