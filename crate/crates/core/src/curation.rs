//! Benchmark samplers: keyword-stratified and balanced child/adult.
//!
//! Draws use ChaCha8 keyed by SHA-256 of the seed and a stream name, with
//! Lemire's bounded integer method and a partial Fisher-Yates shuffle, so a
//! seed selects the same ids on any platform.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::manifest::{ChildPresence, DatasetManifest, Sample, BOY, GIRL, MAN, WOMAN};
use crate::review::{ReviewQueue, ReviewQueueItem};

pub const DEFAULT_PLAN_JSON: &str = include_str!("../data/keyword_plan.json");

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("insufficient pool: need {pos_needed} positives / {neg_needed} negatives, have {pos_available} / {neg_available}")]
    InsufficientPool { pos_available: usize, neg_available: usize, pos_needed: usize, neg_needed: usize },
    #[error("batch size must be >= 1")]
    InvalidBatchSize,
}

/// Seeded random stream.
pub struct SampleRng(ChaCha8Rng);

impl SampleRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"kindersafe-sample\0");
        h.update(seed.to_le_bytes());
        h.update(stream.as_bytes());
        Self(ChaCha8Rng::from_seed(h.finalize().into()))
    }

    /// Uniform in `0..n`, `n >= 1`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let mut m = u128::from(self.0.next_u64()) * u128::from(n);
        if (m as u64) < n {
            let threshold = n.wrapping_neg() % n;
            while (m as u64) < threshold {
                m = u128::from(self.0.next_u64()) * u128::from(n);
            }
        }
        (m >> 64) as u64
    }

    /// `k` distinct positions of `0..n` (k clamped to n), in draw order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordCategory {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordPlan {
    /// Declaration order matters: a sample belongs to the first category it matches.
    pub categories: Vec<KeywordCategory>,
    #[serde(default = "default_per_category")]
    pub per_category: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_per_category() -> usize {
    500
}

impl KeywordPlan {
    /// Nine categories with Portuguese keywords. These lists are editable
    /// configuration, not a reference list.
    pub fn default_portuguese() -> Self {
        Self::from_json(DEFAULT_PLAN_JSON).expect("shipped plan is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, CurationError> {
        let plan: Self = serde_json::from_str(json).map_err(|e| CurationError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: &Path) -> Result<Self, CurationError> {
        let json = std::fs::read_to_string(path).map_err(|e| CurationError::InvalidPlan(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if self.per_category == 0 {
            return Err(CurationError::InvalidPlan("per_category must be >= 1".into()));
        }
        if self.categories.is_empty() {
            return Err(CurationError::InvalidPlan("no categories".into()));
        }
        let mut names = HashSet::new();
        for c in &self.categories {
            if !names.insert(&c.name) {
                return Err(CurationError::InvalidPlan(format!("duplicate category {:?}", c.name)));
            }
            if c.keywords.iter().all(|k| k.trim().is_empty()) {
                return Err(CurationError::InvalidPlan(format!("category {:?} has no keywords", c.name)));
            }
        }
        Ok(())
    }
}

pub fn normalize_text(text: &str) -> String {
    text.nfkc().flat_map(char::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryShortfall {
    pub category: String,
    pub eligible: usize,
    pub requested: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordSample {
    pub manifest: DatasetManifest,
    /// Sample id to the category that drew it.
    pub assignments: BTreeMap<String, String>,
    pub warnings: Vec<CategoryShortfall>,
}

fn searchable(sample: &Sample) -> Option<String> {
    let caption = sample.caption.as_deref()?;
    let mut text = normalize_text(caption);
    if let Some(vd) = &sample.visual_description {
        text.push('\n');
        text.push_str(&normalize_text(vd));
    }
    Some(text)
}

/// Draws up to `per_category` captioned samples per keyword category.
pub fn keyword_sample(manifest: &DatasetManifest, plan: &KeywordPlan) -> Result<KeywordSample, CurationError> {
    plan.validate()?;
    let keywords: Vec<Vec<String>> = plan
        .categories
        .iter()
        .map(|c| c.keywords.iter().map(|k| normalize_text(k.trim())).filter(|k| !k.is_empty()).collect())
        .collect();

    // eligibility is settled before any draw: first matching category claims the sample
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); plan.categories.len()];
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.sort_by(|&a, &b| manifest.samples[a].id.cmp(&manifest.samples[b].id));
    for i in order {
        let Some(text) = searchable(&manifest.samples[i]) else { continue };
        if let Some(c) = keywords.iter().position(|ks| ks.iter().any(|k| text.contains(k.as_str()))) {
            pools[c].push(i);
        }
    }

    let mut chosen = BTreeMap::new();
    let mut warnings = Vec::new();
    for (c, pool) in plan.categories.iter().zip(&pools) {
        if pool.len() < plan.per_category {
            tracing::warn!(category = %c.name, eligible = pool.len(), "category short of its quota");
            warnings.push(CategoryShortfall { category: c.name.clone(), eligible: pool.len(), requested: plan.per_category });
        }
        let mut rng = SampleRng::new(plan.seed, &format!("keyword:{}", c.name));
        for pick in rng.choose(pool.len(), plan.per_category) {
            chosen.insert(pool[pick], c.name.clone());
        }
    }

    let mut assignments = BTreeMap::new();
    let samples = chosen
        .into_iter()
        .map(|(i, category)| {
            let mut s = manifest.samples[i].clone();
            s.extra.insert("keyword_category".into(), category.clone().into());
            assignments.insert(s.id.clone(), category);
            s
        })
        .collect();
    Ok(KeywordSample { manifest: manifest.with_samples(samples), assignments, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedPlan {
    pub positive_count: usize,
    pub negative_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BalancedPlan {
    fn default() -> Self {
        Self { positive_count: 50_000, negative_count: 50_000, seed: 0 }
    }
}

/// Has a real (non-depiction) Boy or Girl box.
pub fn is_child_positive(sample: &Sample) -> bool {
    sample.boxes.iter().any(|b| !b.is_depiction() && matches!(b.class_name(), BOY | GIRL))
}

/// Has a Man or Woman assertion and no child class anywhere.
pub fn is_adult_only(sample: &Sample) -> bool {
    let classes = sample.class_names();
    (classes.contains(MAN) || classes.contains(WOMAN)) && !classes.contains(BOY) && !classes.contains(GIRL)
}

/// Positives and negatives drawn separately; ground truth is set from the pool.
pub fn balanced_sample(manifest: &DatasetManifest, plan: &BalancedPlan) -> Result<DatasetManifest, CurationError> {
    if plan.positive_count == 0 || plan.negative_count == 0 {
        return Err(CurationError::InvalidPlan("counts must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.sort_by(|&a, &b| manifest.samples[a].id.cmp(&manifest.samples[b].id));
    let pos: Vec<usize> = order.iter().copied().filter(|&i| is_child_positive(&manifest.samples[i])).collect();
    let neg: Vec<usize> = order.iter().copied().filter(|&i| is_adult_only(&manifest.samples[i])).collect();
    if pos.len() < plan.positive_count || neg.len() < plan.negative_count {
        return Err(CurationError::InsufficientPool {
            pos_available: pos.len(),
            neg_available: neg.len(),
            pos_needed: plan.positive_count,
            neg_needed: plan.negative_count,
        });
    }
    let mut picked: BTreeMap<usize, ChildPresence> = BTreeMap::new();
    for p in SampleRng::new(plan.seed, "balanced:positive").choose(pos.len(), plan.positive_count) {
        picked.insert(pos[p], ChildPresence::Positive);
    }
    for p in SampleRng::new(plan.seed, "balanced:negative").choose(neg.len(), plan.negative_count) {
        picked.insert(neg[p], ChildPresence::Negative);
    }
    let samples = picked
        .into_iter()
        .map(|(i, truth)| manifest.samples[i].clone().with_ground_truth(truth))
        .collect();
    Ok(manifest.with_samples(samples))
}

/// Review queue over a whole manifest, paged by `batch_size`.
pub fn export_review_batch(manifest: &DatasetManifest, batch_size: usize) -> Result<ReviewQueue, CurationError> {
    if batch_size == 0 {
        return Err(CurationError::InvalidBatchSize);
    }
    Ok(ReviewQueue::new(batch_size, manifest.samples.iter().map(ReviewQueueItem::from_sample).collect()))
}
