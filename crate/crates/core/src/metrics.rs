//! Recall / FPR evaluation and sweep tables.
//!
//! Rates are generic over [`Scalar`]; the acceptance and golden tests run them
//! over exact rationals. Percent strings are formatted from the integer
//! counts, so `99.0` in a report is exact rounding of `tp / (tp + fn)`, not of
//! a float.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DecisionRecord, FinalVerdict};
use crate::manifest::ChildPresence;
use crate::scalar::Scalar;
use crate::vqa::Category;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{} sample(s) lack ground truth: {}", .0.len(), .0.join(", "))]
    UnknownGroundTruth(Vec<String>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    pub fn record(&mut self, predicted_positive: bool, actually_positive: bool) {
        match (predicted_positive, actually_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self::new(self.tp * k, self.fp * k, self.tn * k, self.fn_ * k)
    }

    pub fn recall_fraction(&self) -> Option<(u64, u64)> {
        fraction(self.tp, self.positives())
    }

    pub fn fpr_fraction(&self) -> Option<(u64, u64)> {
        fraction(self.fp, self.negatives())
    }

    pub fn precision_fraction(&self) -> Option<(u64, u64)> {
        fraction(self.tp, self.tp + self.fp)
    }

    /// `(recall + (1 - fpr)) / 2` as one fraction.
    pub fn balanced_accuracy_fraction(&self) -> Option<(u64, u64)> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return None;
        }
        Some((self.tp * n + self.tn * p, 2 * p * n))
    }
}

fn fraction(num: u64, den: u64) -> Option<(u64, u64)> {
    (den > 0).then_some((num, den))
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }
}

/// Percent with one decimal, rounded half-up from the exact fraction;
/// `"—"` when undefined.
pub fn percent_1dp(frac: Option<(u64, u64)>) -> String {
    match frac {
        None => "—".to_string(),
        Some((num, den)) => {
            let tenths = (2000 * num as u128 + den as u128) / (2 * den as u128);
            format!("{}.{}", tenths / 10, tenths % 10)
        }
    }
}

/// Confusion counts for decisions against ground truth; quarantined decisions
/// count as positive predictions.
pub fn confusion(
    records: &[DecisionRecord],
    truth: &HashMap<String, ChildPresence>,
) -> Result<ConfusionCounts, MetricsError> {
    let mut counts = ConfusionCounts::default();
    let mut missing = Vec::new();
    for r in records {
        match truth.get(&r.sample_id) {
            Some(ChildPresence::Positive) => counts.record(r.verdict.predicts_positive(), true),
            Some(ChildPresence::Negative) => counts.record(r.verdict.predicts_positive(), false),
            _ => missing.push(r.sample_id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(MetricsError::UnknownGroundTruth(missing));
    }
    Ok(counts)
}

impl FinalVerdict {
    pub fn predicts_positive(self) -> bool {
        !matches!(self, FinalVerdict::Negative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    /// `None` means undefined (zero denominator).
    pub recall: Option<T>,
    pub fpr: Option<T>,
    pub precision: Option<T>,
    pub balanced_accuracy: Option<T>,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_index: Option<u32>,
}

fn rate<T: Scalar>(frac: Option<(u64, u64)>) -> Option<T> {
    frac.map(|(n, d)| T::from_count(n) / T::from_count(d))
}

pub fn metrics_from_counts<T: Scalar>(counts: ConfusionCounts) -> MetricsReport<T> {
    let recall: Option<T> = rate(counts.recall_fraction());
    let fpr: Option<T> = rate(counts.fpr_fraction());
    let two = T::one() + T::one();
    let balanced_accuracy = match (recall, fpr) {
        (Some(r), Some(f)) => Some((r + (T::one() - f)) / two),
        _ => None,
    };
    MetricsReport {
        recall,
        fpr,
        precision: rate(counts.precision_fraction()),
        balanced_accuracy,
        counts,
        model_name: None,
        category: None,
        prompt_index: None,
    }
}

impl<T: Scalar> MetricsReport<T> {
    pub fn labeled(mut self, model_name: impl Into<String>, category: Category, prompt_index: u32) -> Self {
        self.model_name = Some(model_name.into());
        self.category = Some(category);
        self.prompt_index = Some(prompt_index);
        self
    }

    pub fn to_f64(&self) -> MetricsReport<f64> {
        MetricsReport {
            recall: self.recall.map(Scalar::to_f64_lossy),
            fpr: self.fpr.map(Scalar::to_f64_lossy),
            precision: self.precision.map(Scalar::to_f64_lossy),
            balanced_accuracy: self.balanced_accuracy.map(Scalar::to_f64_lossy),
            counts: self.counts,
            model_name: self.model_name.clone(),
            category: self.category,
            prompt_index: self.prompt_index,
        }
    }

    pub fn to_markdown(&self) -> String {
        let c = &self.counts;
        let mut out = String::new();
        let title = match (&self.model_name, self.category, self.prompt_index) {
            (Some(m), Some(cat), Some(p)) => format!("{m} / {cat} / prompt #{p}"),
            _ => "evaluation".to_string(),
        };
        let _ = writeln!(out, "### {title}\n");
        let _ = writeln!(out, "| Metric | Value (%) |\n|---|---|");
        let _ = writeln!(out, "| Recall | {} |", percent_1dp(c.recall_fraction()));
        let _ = writeln!(out, "| FPR | {} |", percent_1dp(c.fpr_fraction()));
        let _ = writeln!(out, "| Precision | {} |", percent_1dp(c.precision_fraction()));
        let _ = writeln!(out, "| Balanced accuracy | {} |", percent_1dp(c.balanced_accuracy_fraction()));
        let _ = writeln!(out, "\nTP {} · FP {} · TN {} · FN {}", c.tp, c.fp, c.tn, c.fn_);
        out
    }
}

/// Recall descending, then FPR ascending; undefined rates sort last.
fn recall_first<T: Scalar>(a: &MetricsReport<T>, b: &MetricsReport<T>) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let desc = |x: Option<T>, y: Option<T>| match (x, y) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    let asc = |x: Option<T>, y: Option<T>| match (x, y) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    desc(a.recall, b.recall).then_with(|| asc(a.fpr, b.fpr))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub counts: ConfusionCounts,
    pub best_recall: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub model_name: String,
    pub category: Option<Category>,
    /// Keyed by prompt index.
    pub cells: BTreeMap<u32, SweepCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub prompts: Vec<u32>,
    pub rows: Vec<SweepRow>,
    /// Every run, recall-first order.
    pub ranked: Vec<MetricsReport<f64>>,
}

/// Model x category rows, one column pair per prompt, best recall flagged per
/// column (ties broken by lower FPR). A later report for the same
/// model/category/prompt replaces an earlier one.
pub fn sweep_report<T: Scalar>(runs: &[MetricsReport<T>]) -> SweepTable {
    let mut model_order: Vec<String> = Vec::new();
    let mut latest: BTreeMap<(usize, Option<Category>, u32), &MetricsReport<T>> = BTreeMap::new();
    for run in runs {
        let model = run.model_name.clone().unwrap_or_else(|| "unnamed".into());
        let mi = match model_order.iter().position(|m| *m == model) {
            Some(i) => i,
            None => {
                model_order.push(model);
                model_order.len() - 1
            }
        };
        latest.insert((mi, run.category, run.prompt_index.unwrap_or(0)), run);
    }
    let prompts: Vec<u32> = latest.keys().map(|k| k.2).collect::<BTreeSet<_>>().into_iter().collect();

    let mut best: BTreeMap<u32, (usize, Option<Category>)> = BTreeMap::new();
    for &p in &prompts {
        let winner = latest
            .iter()
            .filter(|(k, r)| k.2 == p && r.recall.is_some())
            .min_by(|a, b| recall_first(a.1, b.1).then_with(|| a.0.cmp(b.0)));
        if let Some((k, _)) = winner {
            best.insert(p, (k.0, k.1));
        }
    }

    let mut rows: Vec<SweepRow> = Vec::new();
    for ((mi, cat, p), run) in &latest {
        let key_matches = |r: &SweepRow| r.model_name == model_order[*mi] && r.category == *cat;
        if !rows.last().is_some_and(key_matches) {
            rows.push(SweepRow { model_name: model_order[*mi].clone(), category: *cat, cells: BTreeMap::new() });
        }
        let f = run.to_f64();
        rows.last_mut().expect("row pushed").cells.insert(
            *p,
            SweepCell {
                recall: f.recall,
                fpr: f.fpr,
                counts: run.counts,
                best_recall: best.get(p) == Some(&(*mi, *cat)),
            },
        );
    }

    let mut ranked: Vec<&MetricsReport<T>> = latest.values().copied().collect();
    ranked.sort_by(|a, b| recall_first(a, b));
    SweepTable { prompts, rows, ranked: ranked.into_iter().map(MetricsReport::to_f64).collect() }
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model | Category |");
        for p in &self.prompts {
            let _ = write!(out, " #{p} Recall (%) | #{p} FPR (%) |");
        }
        out.push_str("\n|---|---|");
        for _ in &self.prompts {
            out.push_str("---|---|");
        }
        out.push('\n');
        let mut last_model: Option<&str> = None;
        for row in &self.rows {
            let model = if last_model == Some(row.model_name.as_str()) { "" } else { row.model_name.as_str() };
            last_model = Some(&row.model_name);
            let cat = row.category.map(|c| c.as_str()).unwrap_or("");
            let _ = write!(out, "| {model} | {cat} |");
            for p in &self.prompts {
                match row.cells.get(p) {
                    Some(c) => {
                        let recall = percent_1dp(c.counts.recall_fraction());
                        let recall = if c.best_recall { format!("**{recall}**") } else { recall };
                        let _ = write!(out, " {recall} | {} |", percent_1dp(c.counts.fpr_fraction()));
                    }
                    None => out.push_str(" | |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    #[test]
    fn reconstructed_table_row() {
        // 701 positives, 663 negatives; recall 694/701, fpr 162/663
        let m = metrics_from_counts::<Q>(ConfusionCounts::new(694, 162, 501, 7));
        assert_eq!(m.recall, Some(Ratio::new(694, 701)));
        assert_eq!(m.fpr, Some(Ratio::new(162, 663)));
        let f = m.to_f64();
        assert_eq!(format!("{:.4}", f.recall.unwrap()), "0.9900");
        assert_eq!(format!("{:.4}", f.fpr.unwrap()), "0.2443");
        assert_eq!(percent_1dp(m.counts.recall_fraction()), "99.0");
        assert_eq!(percent_1dp(m.counts.fpr_fraction()), "24.4");
    }

    #[test]
    fn open_images_scale_witness() {
        let m = metrics_from_counts::<Q>(ConfusionCounts::new(717, 1620, 8380, 283));
        assert_eq!(m.recall, Some(Ratio::new(717, 1000)));
        assert_eq!(m.fpr, Some(Ratio::new(162, 1000)));
    }

    #[test]
    fn all_zero_is_undefined() {
        let m = metrics_from_counts::<f64>(ConfusionCounts::default());
        assert_eq!((m.recall, m.fpr, m.precision, m.balanced_accuracy), (None, None, None, None));
        assert_eq!(percent_1dp(m.counts.recall_fraction()), "—");
    }

    #[test]
    fn balanced_accuracy_matches_fraction() {
        let c = ConfusionCounts::new(858, 312, 688, 142);
        let m = metrics_from_counts::<Q>(c);
        let (n, d) = c.balanced_accuracy_fraction().unwrap();
        assert_eq!(m.balanced_accuracy, Some(Ratio::new(n as i64, d as i64)));
    }

    #[test]
    fn scale_invariance_exact() {
        let c = ConfusionCounts::new(13, 4, 27, 2);
        let base = metrics_from_counts::<Q>(c);
        for k in [2, 7, 1000] {
            let s = metrics_from_counts::<Q>(c.scaled(k));
            assert_eq!((s.recall, s.fpr), (base.recall, base.fpr));
        }
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent_1dp(Some((1, 8))), "12.5");
        assert_eq!(percent_1dp(Some((1, 16))), "6.3"); // 6.25
        assert_eq!(percent_1dp(Some((2, 3))), "66.7");
        assert_eq!(percent_1dp(Some((1, 1))), "100.0");
    }

    fn run(model: &str, cat: Category, prompt: u32, c: ConfusionCounts) -> MetricsReport<Q> {
        metrics_from_counts::<Q>(c).labeled(model, cat, prompt)
    }

    #[test]
    fn single_run_table() {
        let t = sweep_report(&[run("m", Category::Detailed, 3, ConfusionCounts::new(9, 1, 9, 1))]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.prompts, vec![3]);
        assert!(t.rows[0].cells[&3].best_recall);
    }

    #[test]
    fn best_recall_flagged() {
        let t = sweep_report(&[
            run("a", Category::Complex, 1, ConfusionCounts::new(98, 10, 90, 2)),
            run("b", Category::Complex, 1, ConfusionCounts::new(99, 20, 80, 1)),
        ]);
        assert!(!t.rows[0].cells[&1].best_recall);
        assert!(t.rows[1].cells[&1].best_recall);
        assert_eq!(t.ranked[0].model_name.as_deref(), Some("b"));
        assert!(t.to_markdown().contains("**99.0**"));
    }

    #[test]
    fn recall_tie_broken_by_fpr() {
        let t = sweep_report(&[
            run("a", Category::Complex, 1, ConfusionCounts::new(99, 20, 80, 1)),
            run("b", Category::Complex, 1, ConfusionCounts::new(99, 10, 90, 1)),
        ]);
        assert!(t.rows[1].cells[&1].best_recall);
        assert_eq!(t.ranked[0].model_name.as_deref(), Some("b"));
    }
}
