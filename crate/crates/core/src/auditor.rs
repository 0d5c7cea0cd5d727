//! Annotation-consistency checks. Findings are advisory; nothing here edits
//! a manifest.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DecisionRecord, FinalVerdict};
use crate::manifest::{AnnotationBox, DatasetManifest, Sample, BOY, GIRL, MAN, WOMAN};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("iou_threshold must be in (0,1], got {0}")]
    Threshold(f64),
    #[error("class {0:?} is both a child and an adult class")]
    OverlappingClasses(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FindingKind {
    DoubleAnnotation,
    MissingChildLabelCandidate,
    DepictionLeak,
    MislabeledAdultChildConflict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    BoxPair { child: AnnotationBox, adult: AnnotationBox, iou: f64 },
    Boxes { boxes: Vec<AnnotationBox> },
    Labels { classes: Vec<String>, verdict: Option<FinalVerdict> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub kind: FindingKind,
    pub sample_id: String,
    pub evidence: Evidence,
    pub severity: Severity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub iou_threshold: f64,
    pub child_classes: BTreeSet<String>,
    pub adult_classes: BTreeSet<String>,
    /// The subset was built to exclude depictions, so depicted child boxes are leaks.
    #[serde(default = "yes")]
    pub depictions_excluded: bool,
}

fn yes() -> bool {
    true
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            child_classes: [BOY, GIRL].into_iter().map(String::from).collect(),
            adult_classes: [MAN, WOMAN].into_iter().map(String::from).collect(),
            depictions_excluded: true,
        }
    }
}

impl AuditConfig {
    pub fn with_iou(mut self, threshold: f64) -> Self {
        self.iou_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(AuditError::Threshold(self.iou_threshold));
        }
        if let Some(c) = self.child_classes.intersection(&self.adult_classes).next() {
            return Err(AuditError::OverlappingClasses(c.clone()));
        }
        Ok(())
    }

    fn is_child(&self, class: &str) -> bool {
        self.child_classes.contains(class)
    }

    fn is_adult(&self, class: &str) -> bool {
        self.adult_classes.contains(class)
    }
}

pub fn iou(a: &AnnotationBox, b: &AnnotationBox) -> f64 {
    a.rect().iou(&b.rect())
}

pub fn find_double_annotations(sample: &Sample, config: &AuditConfig) -> Vec<AuditFinding> {
    let usable = |b: &&AnnotationBox| !b.is_group();
    let children: Vec<&AnnotationBox> = sample.boxes.iter().filter(usable).filter(|b| config.is_child(b.class_name())).collect();
    let adults: Vec<&AnnotationBox> = sample.boxes.iter().filter(usable).filter(|b| config.is_adult(b.class_name())).collect();
    let mut out = Vec::new();
    for child in &children {
        for adult in &adults {
            let overlap = iou(child, adult);
            if overlap >= config.iou_threshold {
                let severity = if child.class_name() == GIRL && adult.class_name() == WOMAN {
                    Severity::Critical
                } else {
                    Severity::Warning
                };
                out.push(AuditFinding {
                    kind: FindingKind::DoubleAnnotation,
                    sample_id: sample.id.clone(),
                    evidence: Evidence::BoxPair { child: (*child).clone(), adult: (*adult).clone(), iou: overlap },
                    severity,
                });
            }
        }
    }
    out
}

fn has_real_child_assertion(sample: &Sample, config: &AuditConfig) -> bool {
    sample.source_labels.iter().any(|l| config.is_child(&l.class_name) && !l.is_depiction)
        || sample.boxes.iter().any(|b| config.is_child(b.class_name()) && !b.is_depiction())
}

fn label_evidence(sample: &Sample, verdict: FinalVerdict) -> Evidence {
    Evidence::Labels { classes: sample.class_names().into_iter().map(String::from).collect(), verdict: Some(verdict) }
}

/// Positive verdict with no child-class label or box at all.
pub fn find_missing_child_labels(sample: &Sample, decision: &DecisionRecord, config: &AuditConfig) -> Option<AuditFinding> {
    if decision.sample_id != sample.id || decision.verdict != FinalVerdict::Positive {
        return None;
    }
    let any_child = sample.class_names().iter().any(|c| config.is_child(c));
    if any_child {
        return None;
    }
    Some(AuditFinding {
        kind: FindingKind::MissingChildLabelCandidate,
        sample_id: sample.id.clone(),
        evidence: label_evidence(sample, decision.verdict),
        severity: Severity::Warning,
    })
}

/// Negative verdict although the annotations assert a real child.
pub fn find_label_conflicts(sample: &Sample, decision: &DecisionRecord, config: &AuditConfig) -> Option<AuditFinding> {
    if decision.sample_id != sample.id || decision.verdict != FinalVerdict::Negative {
        return None;
    }
    if !has_real_child_assertion(sample, config) {
        return None;
    }
    Some(AuditFinding {
        kind: FindingKind::MislabeledAdultChildConflict,
        sample_id: sample.id.clone(),
        evidence: label_evidence(sample, decision.verdict),
        severity: Severity::Info,
    })
}

pub fn find_depiction_leaks(sample: &Sample, config: &AuditConfig) -> Option<AuditFinding> {
    if !config.depictions_excluded {
        return None;
    }
    let boxes: Vec<AnnotationBox> =
        sample.boxes.iter().filter(|b| b.is_depiction() && config.is_child(b.class_name())).cloned().collect();
    if boxes.is_empty() {
        return None;
    }
    Some(AuditFinding {
        kind: FindingKind::DepictionLeak,
        sample_id: sample.id.clone(),
        evidence: Evidence::Boxes { boxes },
        severity: Severity::Warning,
    })
}

pub fn audit_sample(sample: &Sample, decision: Option<&DecisionRecord>, config: &AuditConfig) -> Vec<AuditFinding> {
    let mut out = find_double_annotations(sample, config);
    out.extend(find_depiction_leaks(sample, config));
    if let Some(d) = decision {
        out.extend(find_missing_child_labels(sample, d, config));
        out.extend(find_label_conflicts(sample, d, config));
    }
    out
}

/// All findings in manifest order.
pub fn audit_manifest(
    manifest: &DatasetManifest,
    decisions: &[DecisionRecord],
    config: &AuditConfig,
) -> Result<Vec<AuditFinding>, AuditError> {
    config.validate()?;
    let by_id: HashMap<&str, &DecisionRecord> = decisions.iter().map(|d| (d.sample_id.as_str(), d)).collect();
    let per_sample: Vec<Vec<AuditFinding>> = manifest
        .samples
        .par_iter()
        .map(|s| audit_sample(s, by_id.get(s.id.as_str()).copied(), config))
        .collect();
    Ok(per_sample.into_iter().flatten().collect())
}
