use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DecisionRecord, DetectorError, FinalVerdict, QuarantinePolicy};
use crate::review::{ReviewChoice, ReviewDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedOverride {
    pub sample_id: String,
    pub machine_verdict: FinalVerdict,
    pub decision: ReviewChoice,
    pub reviewer_id: String,
    pub timestamp: DateTime<Utc>,
    /// The human decision differs from what the machine verdict implied.
    pub changed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalManifest {
    #[serde(default)]
    pub run_id: Option<String>,
    pub quarantine_policy: QuarantinePolicy,
    pub remove_ids: Vec<String>,
    pub keep_ids: Vec<String>,
    pub overrides_applied: Vec<AppliedOverride>,
}

fn machine_removes(verdict: FinalVerdict, policy: QuarantinePolicy) -> bool {
    match verdict {
        FinalVerdict::Positive => true,
        FinalVerdict::Negative => false,
        FinalVerdict::Quarantined => policy == QuarantinePolicy::Remove,
    }
}

/// Final keep/remove split. Keep and Remove adjudications always win over
/// the machine verdict; Uncertain leaves the machine outcome in place. When a
/// sample has several adjudications the latest timestamp wins.
pub fn build_removal_manifest(
    records: &[DecisionRecord],
    adjudications: &[ReviewDecision],
    policy: QuarantinePolicy,
) -> Result<RemovalManifest, DetectorError> {
    let by_id: BTreeMap<&str, &DecisionRecord> = records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut latest: BTreeMap<&str, &ReviewDecision> = BTreeMap::new();
    for a in adjudications {
        if !by_id.contains_key(a.sample_id.as_str()) {
            return Err(DetectorError::DanglingOverride(a.sample_id.clone()));
        }
        match latest.get(a.sample_id.as_str()) {
            Some(prev) if prev.timestamp > a.timestamp => {}
            _ => {
                latest.insert(&a.sample_id, a);
            }
        }
    }

    let mut out = RemovalManifest {
        run_id: records.first().map(|r| r.run_id.clone()),
        quarantine_policy: policy,
        ..Default::default()
    };
    for r in records {
        let machine = machine_removes(r.verdict, policy);
        let remove = match latest.get(r.sample_id.as_str()) {
            Some(a) if a.decision.is_final() => {
                let remove = a.decision == ReviewChoice::Remove;
                out.overrides_applied.push(AppliedOverride {
                    sample_id: r.sample_id.clone(),
                    machine_verdict: r.verdict,
                    decision: a.decision,
                    reviewer_id: a.reviewer_id.clone(),
                    timestamp: a.timestamp,
                    changed: remove != machine,
                });
                remove
            }
            _ => machine,
        };
        if remove {
            out.remove_ids.push(r.sample_id.clone());
        } else {
            out.keep_ids.push(r.sample_id.clone());
        }
    }
    out.remove_ids.sort();
    out.keep_ids.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqa::Category;

    fn rec(id: &str, verdict: FinalVerdict) -> DecisionRecord {
        DecisionRecord {
            run_id: "r".into(),
            sample_id: id.into(),
            verdict,
            prompt_index: 3,
            model_name: "m".into(),
            category: Category::Complex,
            raw_answer: None,
            parse_path: None,
            error: None,
            latency_ms: 0,
            attempt_count: 1,
            timestamp: Utc::now(),
        }
    }

    #[test]
    fn human_keep_overrides_positive() {
        let records = [rec("a", FinalVerdict::Positive), rec("b", FinalVerdict::Positive), rec("c", FinalVerdict::Negative)];
        let adj = [ReviewDecision::new("a", ReviewChoice::Keep, "rev")];
        let m = build_removal_manifest(&records, &adj, QuarantinePolicy::Remove).unwrap();
        assert_eq!(m.keep_ids, vec!["a", "c"]);
        assert_eq!(m.remove_ids, vec!["b"]);
        assert_eq!(m.overrides_applied.len(), 1);
        assert!(m.overrides_applied[0].changed);
    }

    #[test]
    fn uncertain_never_overrides() {
        let records = [rec("a", FinalVerdict::Positive), rec("b", FinalVerdict::Negative)];
        let adj = [ReviewDecision::new("a", ReviewChoice::Uncertain, "rev"), ReviewDecision::new("b", ReviewChoice::Uncertain, "rev")];
        let m = build_removal_manifest(&records, &adj, QuarantinePolicy::Remove).unwrap();
        assert_eq!(m.remove_ids, vec!["a"]);
        assert_eq!(m.keep_ids, vec!["b"]);
        assert!(m.overrides_applied.is_empty());
    }

    #[test]
    fn quarantine_policy() {
        let records = [rec("q", FinalVerdict::Quarantined)];
        assert_eq!(build_removal_manifest(&records, &[], QuarantinePolicy::Remove).unwrap().remove_ids, vec!["q"]);
        assert_eq!(build_removal_manifest(&records, &[], QuarantinePolicy::Keep).unwrap().keep_ids, vec!["q"]);
    }

    #[test]
    fn dangling_override() {
        let records = [rec("a", FinalVerdict::Positive)];
        let adj = [ReviewDecision::new("zzz", ReviewChoice::Keep, "rev")];
        assert!(matches!(
            build_removal_manifest(&records, &adj, QuarantinePolicy::Remove),
            Err(DetectorError::DanglingOverride(id)) if id == "zzz"
        ));
    }

    #[test]
    fn latest_adjudication_wins() {
        let records = [rec("a", FinalVerdict::Negative)];
        let mut first = ReviewDecision::new("a", ReviewChoice::Remove, "rev");
        let mut second = ReviewDecision::new("a", ReviewChoice::Keep, "rev");
        first.timestamp = "2024-01-01T00:00:00Z".parse().unwrap();
        second.timestamp = "2024-01-02T00:00:00Z".parse().unwrap();
        let m = build_removal_manifest(&records, &[second, first], QuarantinePolicy::Remove).unwrap();
        assert_eq!(m.keep_ids, vec!["a"]);
        assert!(!m.overrides_applied[0].changed);
    }
}
