//! Acceptance checks. Each check prints one PASS/FAIL line; the binary exits
//! non-zero if any check fails. Tolerances are pinned as constants below.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use kindersafe::auditor::{audit_manifest, AuditConfig, FindingKind};
use kindersafe::cleaning::{dedup, similarity_filter, CleaningConfig, PerceptualHash, PrecomputedHashes, TableScorer};
use kindersafe::curation::{balanced_sample, keyword_sample, BalancedPlan, KeywordPlan};
use kindersafe::detector::{classify_manifest, read_log, DecisionRecord, DetectorError, FinalVerdict, RunConfig, DECISIONS_FILE};
use kindersafe::energy::{EnergyModel, RateTable};
use kindersafe::manifest::{AnnotationBox, ChildPresence, DatasetManifest, LabelAssertion, Sample, BOY, GIRL, MAN, WOMAN};
use kindersafe::metrics::{confusion, metrics_from_counts, percent_1dp};
use kindersafe::prompts::{PromptRegistry, PromptTemplate};
use kindersafe::vqa::{parse_text, BackendInfo, Category, MockBackend, MockBackendConfig, Verdict, VqaAnswer, VqaBackend, VqaError};
use kindersafe::{Rational, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METRICS_VECTORS: usize = 1_000;
const METRICS_MAX_LEN: usize = 2_000;
const METRICS_BUDGET: Duration = Duration::from_secs(10);

const MIRROR_SEED: u64 = 7;
const MIRROR_MISS: f64 = 0.01;
const MIRROR_FALSE_ALARM: f64 = 0.244;
// tolerances in basis points of a rate (1 pp = 100 bp)
const SMALL_RECALL_TOL_BP: i64 = 100;
const SMALL_FPR_TOL_BP: i64 = 350;
const LARGE_RECALL_TOL_BP: i64 = 40;
const LARGE_FPR_TOL_BP: i64 = 120;
const MIRROR_BUDGET: Duration = Duration::from_secs(60);

const PROPORTION_TOTAL: usize = 10_000;
const PROPORTION_POSITIVE: usize = 1_539;

const PARSER_FUZZ: usize = 10_000;
const PARSER_GARBAGE: usize = 2_000;

const ENERGY_IMAGES: u64 = 100_000;
const ENERGY_TOL: (i64, i64) = (1, 1000);
const INTENSITY_TOL: (i64, i64) = (1, 100);
const AGE_RATIO: (i64, i64) = (177, 10);
const AGE_RATIO_TOL: (i64, i64) = (2, 100);

const CLEANING_FIXTURES: usize = 200;
const AUDIT_SAMPLES: usize = 500;
const RESUME_SAMPLES: usize = 1_000;
const RESUME_KILL_AFTER: usize = 500;

fn ratio(n: usize, d: usize) -> Rational {
    Rational::new(n as i64, d as i64)
}

fn abs(r: Rational) -> Rational {
    if r < Rational::from_integer(0) {
        -r
    } else {
        r
    }
}

fn record(id: &str, verdict: FinalVerdict) -> DecisionRecord {
    DecisionRecord {
        run_id: String::new(),
        sample_id: id.to_string(),
        verdict,
        prompt_index: 3,
        model_name: String::new(),
        category: Category::Complex,
        raw_answer: None,
        parse_path: None,
        error: None,
        latency_ms: 0,
        attempt_count: 1,
        timestamp: chrono::DateTime::UNIX_EPOCH,
    }
}

fn truth_manifest(positives: usize, negatives: usize) -> DatasetManifest {
    let samples = (0..positives + negatives)
        .map(|i| {
            let truth = if i < positives { ChildPresence::Positive } else { ChildPresence::Negative };
            Sample::new(format!("img{i:06}"), format!("{i}.jpg")).with_ground_truth(truth)
        })
        .collect();
    DatasetManifest::new("synthetic", samples)
}

fn check_metrics_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut total = 0usize;
    for v in 0..METRICS_VECTORS {
        let n = rng.random_range(1..=METRICS_MAX_LEN);
        total += n;
        let mut records = Vec::with_capacity(n);
        let mut truth = HashMap::with_capacity(n);
        let (mut tp, mut fp, mut tn, mut fn_) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            let id = format!("{i}");
            let verdict = match rng.random_range(0..3) {
                0 => FinalVerdict::Positive,
                1 => FinalVerdict::Negative,
                _ => FinalVerdict::Quarantined,
            };
            let positive = rng.random_bool(0.5);
            let flagged = verdict != FinalVerdict::Negative;
            match (flagged, positive) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
            truth.insert(id.clone(), if positive { ChildPresence::Positive } else { ChildPresence::Negative });
            records.push(record(&id, verdict));
        }
        let counts = confusion(&records, &truth).map_err(|e| e.to_string())?;
        let got = metrics_from_counts::<Rational>(counts);
        let want_recall = (tp + fn_ > 0).then(|| Rational::new(tp, tp + fn_));
        let want_fpr = (fp + tn > 0).then(|| Rational::new(fp, fp + tn));
        let want_precision = (tp + fp > 0).then(|| Rational::new(tp, tp + fp));
        if got.recall != want_recall || got.fpr != want_fpr || got.precision != want_precision {
            return Err(format!("vector {v}: got {:?}/{:?}, oracle {want_recall:?}/{want_fpr:?}", got.recall, got.fpr));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > METRICS_BUDGET {
        return Err(format!("exact but took {elapsed:.2?} (budget {METRICS_BUDGET:?})"));
    }
    Ok(format!("{METRICS_VECTORS} vectors, {total} decisions, exact rational match, {elapsed:.2?} < {METRICS_BUDGET:?}"))
}

async fn mirror(positives: usize, negatives: usize) -> Result<(Rational, Rational, kindersafe::metrics::ConfusionCounts), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = truth_manifest(positives, negatives);
    let cfg = MockBackendConfig { verbose_fraction: 0.2, ..MockBackendConfig::new(MIRROR_MISS, MIRROR_FALSE_ALARM, MIRROR_SEED) };
    let backend = MockBackend::new(cfg).map_err(|e| e.to_string())?.named("llava-v1.6-vicuna-7b", Category::Detailed);
    let mut run = RunConfig::new(dir.path());
    run.prompt_index = 3;
    let out = classify_manifest(&manifest, &PromptRegistry::builtin(), &backend, &run).await.map_err(|e| e.to_string())?;
    let truth: HashMap<String, ChildPresence> = manifest.samples.iter().map(|s| (s.id.clone(), s.ground_truth)).collect();
    let counts = confusion(&out.records, &truth).map_err(|e| e.to_string())?;
    let m = metrics_from_counts::<Rational>(counts);
    Ok((m.recall.ok_or("recall undefined")?, m.fpr.ok_or("fpr undefined")?, counts))
}

fn check_rate_mirror(rt: &tokio::runtime::Runtime) -> Result<String, String> {
    let start = Instant::now();
    let bp = |x: i64| Rational::new(x, 10_000);
    let mut details = Vec::new();
    let mut ok = true;
    for (pos, neg, rtol, ftol) in [(701, 663, SMALL_RECALL_TOL_BP, SMALL_FPR_TOL_BP), (10_000, 10_000, LARGE_RECALL_TOL_BP, LARGE_FPR_TOL_BP)] {
        let (recall, fpr, counts) = rt.block_on(mirror(pos, neg))?;
        let r_ok = abs(recall - bp(9_900)) <= bp(rtol);
        let f_ok = abs(fpr - bp(2_440)) <= bp(ftol);
        ok &= r_ok && f_ok;
        details.push(format!(
            "{pos}/{neg}: recall {}% (99.0±{:.1}) fpr {}% (24.4±{:.1}) [tp {} fn {} fp {} tn {}]",
            percent_1dp(counts.recall_fraction()),
            rtol as f64 / 100.0,
            percent_1dp(counts.fpr_fraction()),
            ftol as f64 / 100.0,
            counts.tp,
            counts.fn_,
            counts.fp,
            counts.tn
        ));
    }
    let elapsed = start.elapsed();
    let line = format!("{}; {elapsed:.2?} < {MIRROR_BUDGET:?}", details.join("; "));
    if ok && elapsed <= MIRROR_BUDGET {
        Ok(line)
    } else {
        Err(line)
    }
}

fn check_proportion(rt: &tokio::runtime::Runtime) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = truth_manifest(PROPORTION_POSITIVE, PROPORTION_TOTAL - PROPORTION_POSITIVE);
    let backend = MockBackend::new(MockBackendConfig::new(0.0, 0.0, 3)).map_err(|e| e.to_string())?;
    let out = rt
        .block_on(classify_manifest(&manifest, &PromptRegistry::builtin(), &backend, &RunConfig::new(dir.path())))
        .map_err(|e| e.to_string())?;
    let flagged = out.records.iter().filter(|r| r.verdict.predicts_positive()).count();
    let fraction = ratio(flagged, out.records.len());
    let pct = percent_2dp(flagged, out.records.len());
    if fraction == ratio(PROPORTION_POSITIVE, PROPORTION_TOTAL) && pct == "15.39" {
        Ok(format!("{flagged}/{} flagged = {pct}% exactly", out.records.len()))
    } else {
        Err(format!("{flagged}/{} flagged = {pct}%", out.records.len()))
    }
}

fn percent_2dp(n: usize, d: usize) -> String {
    let hundredths = (20_000 * n as u128 + d as u128) / (2 * d as u128);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn fuzz_token(rng: &mut ChaCha8Rng, word: &str) -> String {
    let cased: String = word.chars().map(|c| if rng.random_bool(0.5) { c.to_ascii_uppercase() } else { c }).collect();
    let quotes = ["", "\"", "'", "`", "“", "*", "**"];
    let q = quotes[rng.random_range(0..quotes.len())];
    let close = if q == "“" { "”" } else { q };
    let trail = ["", ".", "!", ",", ";", ":", "...", " .", "!!", ".\n"];
    let lead = ["", " ", "  ", "\n", "\t"];
    format!(
        "{}{q}{cased}{close}{}{}",
        lead[rng.random_range(0..lead.len())],
        trail[rng.random_range(0..trail.len())],
        lead[rng.random_range(0..lead.len())]
    )
}

fn garbage(rng: &mut ChaCha8Rng) -> String {
    // no 'n' or 'y' in the alphabet, so neither answer token can occur
    const ALPHABET: &[char] = &[
        'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'o', 'p', 'q', 'r', 's', 't', 'u', 'v', 'w', 'x', 'z',
        'A', 'E', 'I', 'O', 'U', '0', '7', '9', ' ', ' ', '.', ',', '?', '!', '-', '_', 'é', 'ç', 'ß', '中', '🙂', '\n', '"',
    ];
    let len = rng.random_range(0..40);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

struct Scripted(HashMap<String, String>);

#[async_trait]
impl VqaBackend for Scripted {
    fn info(&self) -> BackendInfo {
        BackendInfo { kind: "scripted".into(), model_name: "scripted".into(), category: Category::Complex, fingerprint: serde_json::Value::Null }
    }

    async fn ask(&self, sample: &Sample, _prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError> {
        Ok(VqaAnswer { raw_text: self.0[&sample.id].clone(), latency_ms: 0, attempt_count: 1 })
    }
}

fn check_parser(rt: &tokio::runtime::Runtime) -> Result<String, String> {
    let canonical = [
        ("Yes, there is a child in the picture, specifically a baby or a toddler.", Verdict::Positive),
        ("Yes", Verdict::Positive),
        ("No", Verdict::Negative),
        ("No", Verdict::Negative),
    ];
    for (text, want) in canonical {
        let got = parse_text(text).map_err(|e| e.to_string())?.value;
        if got != want {
            return Err(format!("canonical output {text:?} parsed as {got:?}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..PARSER_FUZZ {
        let (word, want) = if rng.random_bool(0.5) { ("yes", Verdict::Positive) } else { ("no", Verdict::Negative) };
        let text = fuzz_token(&mut rng, word);
        match parse_text(&text) {
            Ok(v) if v.value == want => {}
            other => return Err(format!("fuzzed {text:?} gave {other:?}")),
        }
    }
    let mut answers: Vec<String> = (0..PARSER_GARBAGE).map(|_| garbage(&mut rng)).collect();
    answers.extend(
        ["", "   ", "I cannot tell.", "Maybe", "N/A", "null", "Yess", "Noo", "¯\\_(ツ)_/¯", "<html>502</html>", "ok", "42"]
            .iter()
            .map(|s| s.to_string()),
    );
    let manifest = DatasetManifest::new(
        "garbage",
        (0..answers.len()).map(|i| Sample::new(format!("g{i:05}"), "x.jpg").with_ground_truth(ChildPresence::Negative)).collect(),
    );
    let script: HashMap<String, String> = manifest.samples.iter().map(|s| s.id.clone()).zip(answers.iter().cloned()).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = rt
        .block_on(classify_manifest(&manifest, &PromptRegistry::builtin(), &Scripted(script), &RunConfig::new(dir.path())))
        .map_err(|e| e.to_string())?;
    if let Some(bad) = out.records.iter().find(|r| r.verdict == FinalVerdict::Negative) {
        return Err(format!("garbage {:?} routed to Negative", bad.raw_answer));
    }
    let quarantined = out.records.iter().filter(|r| r.verdict == FinalVerdict::Quarantined).count();
    Ok(format!(
        "4/4 canonical outputs, {PARSER_FUZZ}/{PARSER_FUZZ} fuzzed variants, {} garbage answers: {quarantined} quarantined, 0 negative",
        answers.len()
    ))
}

fn check_energy() -> Result<String, String> {
    let table = RateTable::shipped();
    let model = EnergyModel::<Rational>::from_table(&table).map_err(|e| e.to_string())?;
    let tol = Rational::new(ENERGY_TOL.0, ENERGY_TOL.1);
    let default_intensity = Rational::from_decimal(&table.carbon_intensity).ok_or("bad intensity")?;
    let mut worst_intensity = Rational::from_integer(0);
    let mut uniform_worst = (String::new(), Rational::from_integer(0));
    for row in &table.models {
        let rep = model.estimate(&row.model, ENERGY_IMAGES).map_err(|e| e.to_string())?;
        let energy = Rational::from_decimal(&row.energy_kwh).ok_or("bad row")?;
        let co2 = Rational::from_decimal(&row.co2_kg).ok_or("bad row")?;
        if abs(rep.energy_kwh - energy) > tol || abs(rep.co2_kg - co2) > tol {
            return Err(format!("{}: {} kWh / {} kg", row.model, rep.energy_kwh.to_f64_lossy(), rep.co2_kg.to_f64_lossy()));
        }
        let rel = abs(co2 / energy - default_intensity) / default_intensity;
        worst_intensity = worst_intensity.max(rel);
        let uniform = abs(energy * default_intensity - co2);
        if uniform > uniform_worst.1 {
            uniform_worst = (row.model.clone(), uniform);
        }
    }
    if worst_intensity > Rational::new(INTENSITY_TOL.0, INTENSITY_TOL.1) {
        return Err(format!("intensity spread {:.3}% exceeds 1%", worst_intensity.to_f64_lossy() * 100.0));
    }
    let vicuna = table.row("llava-v1.6-vicuna-7b").ok_or("missing row")?;
    let age = table.row("age-estimation").ok_or("missing row")?;
    let r = Rational::from_decimal(&vicuna.energy_kwh).unwrap() / Rational::from_decimal(&age.energy_kwh).unwrap();
    let target = Rational::new(AGE_RATIO.0, AGE_RATIO.1);
    if abs(r - target) / target > Rational::new(AGE_RATIO_TOL.0, AGE_RATIO_TOL.1) {
        return Err(format!("age-estimation ratio {:.3}", r.to_f64_lossy()));
    }
    Ok(format!(
        "{} rows within 0.001 kWh/kg at {ENERGY_IMAGES} images; intensity spread {:.3}% (< 1%); ratio {:.3}x vs 17.7x; \
         single 0.0983 intensity would miss {} by {:.4} kg",
        table.models.len(),
        worst_intensity.to_f64_lossy() * 100.0,
        r.to_f64_lossy(),
        uniform_worst.0,
        uniform_worst.1.to_f64_lossy()
    ))
}

fn brute_force_keep(ids: &[String], hashes: &HashMap<String, PerceptualHash>, radius: u32) -> BTreeSet<String> {
    let hashed: Vec<&String> = ids.iter().filter(|id| hashes.contains_key(*id)).collect();
    let n = hashed.len();
    let mut label: Vec<usize> = (0..n).collect();
    // naive fixed-point label propagation
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if hashes[hashed[i]].distance(hashes[hashed[j]]) <= radius && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut best: BTreeMap<usize, &String> = BTreeMap::new();
    for (i, id) in hashed.iter().enumerate() {
        let e = best.entry(label[i]).or_insert(id);
        if *id < *e {
            *e = id;
        }
    }
    best.into_values().cloned().collect()
}

fn check_cleaning() -> Result<String, String> {
    let cfg = CleaningConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut samples_seen = 0usize;
    for f in 0..CLEANING_FIXTURES {
        let n = rng.random_range(1..60);
        let centers: Vec<u64> = (0..rng.random_range(1..8)).map(|_| rng.random()).collect();
        let mut hashes = HashMap::new();
        let mut samples = Vec::new();
        let mut scores = HashMap::new();
        for i in 0..n {
            let id = format!("f{f}-{i:03}");
            let mut h = centers[rng.random_range(0..centers.len())];
            for _ in 0..rng.random_range(0..12) {
                h ^= 1 << rng.random_range(0..64);
            }
            if !rng.random_bool(0.05) {
                hashes.insert(id.clone(), PerceptualHash(h));
            }
            let mut s = Sample::new(id.clone(), format!("{id}.jpg"));
            if !rng.random_bool(0.1) {
                s = s.with_caption(format!("legenda {i}"));
            }
            let score = match rng.random_range(0..4) {
                0 => 0.19,
                1 => 0.2,
                _ => rng.random::<f64>(),
            };
            scores.insert(id, score);
            samples.push(s);
        }
        samples_seen += n;
        let m = DatasetManifest::new("fixture", samples);
        let hasher = PrecomputedHashes(hashes.clone());
        let (d1, r1) = dedup(&m, &cfg, &hasher).map_err(|e| e.to_string())?;

        let ids: Vec<String> = m.ids().map(String::from).collect();
        let oracle = brute_force_keep(&ids, &hashes, cfg.hamming_threshold);
        let kept: BTreeSet<String> = d1.ids().map(String::from).collect();
        if kept != oracle {
            return Err(format!("fixture {f}: kept set differs from brute-force components"));
        }

        let (d2, r2) = dedup(&d1, &cfg, &hasher).map_err(|e| e.to_string())?;
        if d2.ids().ne(d1.ids()) || !r2.removed_duplicates.is_empty() {
            return Err(format!("fixture {f}: dedup not idempotent"));
        }

        let mut shuffled = m.samples.clone();
        shuffled.shuffle(&mut rng);
        let (d3, r3) = dedup(&m.with_samples(shuffled), &cfg, &hasher).map_err(|e| e.to_string())?;
        let kept3: BTreeSet<String> = d3.ids().map(String::from).collect();
        if kept3 != kept || r3.removed_duplicates != r1.removed_duplicates || r3.quarantined != r1.quarantined {
            return Err(format!("fixture {f}: dedup depends on input order"));
        }

        let scorer = TableScorer { scores: scores.clone(), fallback: 1.0 };
        let (out, r4) = similarity_filter(&d1, &cfg, &scorer).map_err(|e| e.to_string())?;
        for s in &d1.samples {
            let removed = r4.removed_low_similarity.iter().any(|l| l.id == s.id);
            if s.caption.is_some() && (scores[&s.id] < 0.2) != removed {
                return Err(format!("fixture {f}: {} score {} removed={removed}", s.id, scores[&s.id]));
            }
        }
        let report = r1.then(r4);
        let mut buckets: BTreeMap<String, usize> = BTreeMap::new();
        for id in out.ids() {
            *buckets.entry(id.to_string()).or_default() += 1;
        }
        for g in &report.removed_duplicates {
            for id in &g.removed_ids {
                *buckets.entry(id.clone()).or_default() += 1;
            }
        }
        for l in &report.removed_low_similarity {
            *buckets.entry(l.id.clone()).or_default() += 1;
        }
        for q in &report.quarantined {
            *buckets.entry(q.id.clone()).or_default() += 1;
        }
        let all: BTreeSet<String> = ids.iter().cloned().collect();
        if buckets.len() != all.len() || buckets.values().any(|&c| c != 1) || buckets.keys().cloned().collect::<BTreeSet<_>>() != all {
            return Err(format!("fixture {f}: conservation partition violated"));
        }
        if report.kept_count + report.removed_count != m.len() {
            return Err(format!("fixture {f}: counts do not add up"));
        }
    }
    // exact boundary at the default threshold
    let m = DatasetManifest::new(
        "b",
        vec![Sample::new("lo", "lo.jpg").with_caption("a"), Sample::new("hi", "hi.jpg").with_caption("b")],
    );
    let scorer = TableScorer { scores: [("lo".to_string(), 0.19), ("hi".to_string(), 0.20)].into(), fallback: 1.0 };
    let (out, _) = similarity_filter(&m, &cfg, &scorer).map_err(|e| e.to_string())?;
    if out.ids().collect::<Vec<_>>() != vec!["hi"] {
        return Err("0.19/0.20 boundary".into());
    }
    Ok(format!(
        "{CLEANING_FIXTURES} fixtures ({samples_seen} samples): matches brute-force components, idempotent, order-stable, \
         partition conserved; 0.19 removed / 0.20 kept"
    ))
}

type Planted = BTreeSet<(String, FindingKind)>;

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn planted_audit_fixture(rng: &mut ChaCha8Rng) -> (DatasetManifest, Vec<DecisionRecord>) {
    let bx = |class: &str, c: [f64; 4]| AnnotationBox::new(class, c).unwrap();
    let mut samples = Vec::new();
    let mut decisions = Vec::new();
    for i in 0..AUDIT_SAMPLES {
        let id = format!("a{i:04}");
        let mut s = Sample::new(id.clone(), format!("{id}.jpg"));
        let x = rng.random_range(0.0..0.4);
        let y = rng.random_range(0.0..0.4);
        match rng.random_range(0..8) {
            // double annotation: child box nearly identical to the adult box
            0 => {
                let (c, a) = if rng.random_bool(0.5) { (GIRL, WOMAN) } else { (BOY, MAN) };
                s = s.with_box(bx(a, [x, y, x + 0.5, y + 0.5])).with_box(bx(c, [x + 0.02, y + 0.02, x + 0.5, y + 0.5]));
            }
            // adjacent boxes, clearly below threshold
            1 => {
                s = s.with_box(bx(MAN, [x, y, x + 0.2, y + 0.5])).with_box(bx(BOY, [x + 0.15, y, x + 0.35, y + 0.5]));
            }
            // overlapping group box is not a double annotation
            2 => {
                s = s.with_box(bx(WOMAN, [x, y, x + 0.5, y + 0.5]).with_group(true)).with_box(bx(GIRL, [x, y, x + 0.5, y + 0.5]));
            }
            // depiction leak
            3 => s = s.with_box(bx(BOY, [x, y, x + 0.3, y + 0.3]).with_depiction(true)),
            // depicted adult is not a leak
            4 => s = s.with_box(bx(WOMAN, [x, y, x + 0.3, y + 0.3]).with_depiction(true)),
            // adult-only labels
            5 => s = s.with_label(LabelAssertion::image(MAN)),
            6 => s = s.with_label(LabelAssertion::image(GIRL)).with_box(bx(GIRL, [x, y, x + 0.1, y + 0.1])),
            _ => {}
        }
        let verdict = match rng.random_range(0..3) {
            0 => FinalVerdict::Positive,
            1 => FinalVerdict::Negative,
            _ => FinalVerdict::Quarantined,
        };
        decisions.push(record(&id, verdict));
        samples.push(s);
    }
    (DatasetManifest::new("audit", samples), decisions)
}

fn audit_oracle(m: &DatasetManifest, decisions: &[DecisionRecord], threshold: f64) -> (usize, Planted, BTreeMap<FindingKind, usize>) {
    let child = |c: &str| c == BOY || c == GIRL;
    let adult = |c: &str| c == MAN || c == WOMAN;
    let mut pairs = 0;
    let mut expected = Planted::new();
    let mut counts = BTreeMap::new();
    let by_id: HashMap<&str, FinalVerdict> = decisions.iter().map(|d| (d.sample_id.as_str(), d.verdict)).collect();
    for s in &m.samples {
        for a in &s.boxes {
            for b in &s.boxes {
                if child(a.class_name()) && adult(b.class_name()) && !a.is_group() && !b.is_group() && oracle_iou(a.coords(), b.coords()) >= threshold {
                    pairs += 1;
                    *counts.entry(FindingKind::DoubleAnnotation).or_insert(0) += 1;
                    expected.insert((s.id.clone(), FindingKind::DoubleAnnotation));
                }
            }
        }
        if s.boxes.iter().any(|b| child(b.class_name()) && b.is_depiction()) {
            *counts.entry(FindingKind::DepictionLeak).or_insert(0) += 1;
            expected.insert((s.id.clone(), FindingKind::DepictionLeak));
        }
        let any_child = s.source_labels.iter().any(|l| child(&l.class_name)) || s.boxes.iter().any(|b| child(b.class_name()));
        let real_child = s.source_labels.iter().any(|l| child(&l.class_name) && !l.is_depiction)
            || s.boxes.iter().any(|b| child(b.class_name()) && !b.is_depiction());
        match by_id.get(s.id.as_str()) {
            Some(FinalVerdict::Positive) if !any_child => {
                *counts.entry(FindingKind::MissingChildLabelCandidate).or_insert(0) += 1;
                expected.insert((s.id.clone(), FindingKind::MissingChildLabelCandidate));
            }
            Some(FinalVerdict::Negative) if real_child => {
                *counts.entry(FindingKind::MislabeledAdultChildConflict).or_insert(0) += 1;
                expected.insert((s.id.clone(), FindingKind::MislabeledAdultChildConflict));
            }
            _ => {}
        }
    }
    (pairs, expected, counts)
}

fn check_auditor() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (m, decisions) = planted_audit_fixture(&mut rng);
    let cfg = AuditConfig::default();
    let before = m.digest();
    let findings = audit_manifest(&m, &decisions, &cfg).map_err(|e| e.to_string())?;
    if m.digest() != before {
        return Err("audit changed the manifest".into());
    }
    let (_, expected, want) = audit_oracle(&m, &decisions, cfg.iou_threshold);
    let mut got = BTreeMap::new();
    for f in &findings {
        *got.entry(f.kind).or_insert(0usize) += 1;
    }
    let got_set: Planted = findings.iter().map(|f| (f.sample_id.clone(), f.kind)).collect();
    if got != want || got_set != expected {
        let spurious = got_set.difference(&expected).count();
        let missed = expected.difference(&got_set).count();
        return Err(format!("got {got:?}, oracle {want:?}; {spurious} spurious, {missed} missed"));
    }
    for f in &findings {
        if let kindersafe::auditor::Evidence::BoxPair { iou, child, adult } = &f.evidence {
            let critical = child.class_name() == GIRL && adult.class_name() == WOMAN;
            if *iou < cfg.iou_threshold || critical != (f.severity == kindersafe::auditor::Severity::Critical) {
                return Err(format!("bad evidence on {}", f.sample_id));
            }
        }
    }
    let fmt: Vec<String> = want.iter().map(|(k, v)| format!("{k:?}={v}")).collect();
    Ok(format!("{AUDIT_SAMPLES} samples: {} (exact, 0 spurious); manifest digest unchanged", fmt.join(", ")))
}

struct DiesAfter {
    inner: MockBackend,
    budget: std::sync::atomic::AtomicUsize,
}

#[async_trait]
impl VqaBackend for DiesAfter {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    async fn ask(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<VqaAnswer, VqaError> {
        let left = self.budget.fetch_sub(1, std::sync::atomic::Ordering::SeqCst);
        if left == 0 || left > usize::MAX / 2 {
            self.budget.store(0, std::sync::atomic::Ordering::SeqCst);
            return Err(VqaError::Transport { attempts: 1, message: "connection refused".into() });
        }
        self.inner.ask(sample, prompt).await
    }
}

fn decision_set(path: &Path) -> Result<(usize, BTreeSet<String>), String> {
    let (_, records, _) = read_log(&path.join(DECISIONS_FILE)).map_err(|e| e.to_string())?;
    let n = records.len();
    let set = records
        .iter()
        .map(|r| serde_json::json!([r.run_id, r.sample_id, r.verdict, r.prompt_index, r.model_name, r.raw_answer, r.parse_path]).to_string())
        .collect();
    Ok((n, set))
}

fn check_resume(rt: &tokio::runtime::Runtime) -> Result<String, String> {
    let manifest = truth_manifest(RESUME_SAMPLES / 4, RESUME_SAMPLES - RESUME_SAMPLES / 4);
    let registry = PromptRegistry::builtin();
    let cfg = MockBackendConfig { verbose_fraction: 0.3, ..MockBackendConfig::new(0.05, 0.2, 99) };
    let mock = MockBackend::new(cfg).map_err(|e| e.to_string())?;

    let full_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    rt.block_on(classify_manifest(&manifest, &registry, &mock, &RunConfig::new(full_dir.path()))).map_err(|e| e.to_string())?;

    let cut_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dying = DiesAfter { inner: mock.clone(), budget: RESUME_KILL_AFTER.into() };
    let mut run = RunConfig::new(cut_dir.path());
    run.max_consecutive_backend_failures = 1;
    let first = rt.block_on(classify_manifest(&manifest, &registry, &dying, &run));
    let completed = match first {
        Err(DetectorError::BackendDown { completed, .. }) => completed,
        other => return Err(format!("expected the first half to stop, got {:?}", other.map(|o| o.records.len()))),
    };
    // a write torn by the kill
    let mut f = std::fs::OpenOptions::new().append(true).open(cut_dir.path().join(DECISIONS_FILE)).map_err(|e| e.to_string())?;
    f.write_all(br#"{"run_id":"x","sample_id":"img0009"#).map_err(|e| e.to_string())?;
    drop(f);
    let resumed = rt.block_on(classify_manifest(&manifest, &registry, &mock, &run)).map_err(|e| e.to_string())?;

    let (n_full, full) = decision_set(full_dir.path())?;
    let (n_cut, cut) = decision_set(cut_dir.path())?;
    if full != cut || n_cut != RESUME_SAMPLES || n_full != RESUME_SAMPLES {
        return Err(format!("uninterrupted {n_full} records vs resumed {n_cut}; sets equal: {}", full == cut));
    }
    Ok(format!(
        "{RESUME_SAMPLES} samples, killed after {completed} with a torn line, resumed {} more; log set-equal, no duplicates",
        resumed.newly_decided
    ))
}

fn ample_pool(plan: &KeywordPlan, per: usize) -> DatasetManifest {
    let mut samples = Vec::new();
    for (ci, c) in plan.categories.iter().enumerate() {
        for i in 0..per {
            let kw = &c.keywords[i % c.keywords.len()];
            let mut s = Sample::new(format!("c{ci}-{i:04}"), "x.jpg").with_caption(format!("Foto: {} n.{i}", kw.to_uppercase()));
            if i % 7 == 0 {
                s.visual_description = Some("imagem colorida".into());
            }
            samples.push(s);
        }
    }
    samples.push(Sample::new("nocaption", "x.jpg"));
    DatasetManifest::new("pool", samples)
}

fn check_curation() -> Result<String, String> {
    let plan = KeywordPlan { seed: 42, ..KeywordPlan::default_portuguese() };
    let pool = ample_pool(&plan, 800);
    let a = keyword_sample(&pool, &plan).map_err(|e| e.to_string())?;
    let b = keyword_sample(&pool, &plan).map_err(|e| e.to_string())?;
    let ids_a: Vec<&str> = a.manifest.ids().collect();
    if ids_a != b.manifest.ids().collect::<Vec<_>>() {
        return Err("keyword_sample not deterministic".into());
    }
    let unique: BTreeSet<&str> = ids_a.iter().copied().collect();
    if a.manifest.len() != 4_500 || unique.len() != 4_500 || !a.warnings.is_empty() {
        return Err(format!("9x500 plan gave {} samples ({} unique, {} warnings)", a.manifest.len(), unique.len(), a.warnings.len()));
    }
    let other = keyword_sample(&pool, &KeywordPlan { seed: 43, ..plan.clone() }).map_err(|e| e.to_string())?;
    let differs = other.manifest.ids().ne(a.manifest.ids());

    let mut oi = Vec::new();
    for i in 0..3_000 {
        let b = AnnotationBox::new(if i % 2 == 0 { BOY } else { GIRL }, [0.1, 0.1, 0.4, 0.4]).unwrap();
        oi.push(Sample::new(format!("p{i:05}"), "x.jpg").with_box(b));
        oi.push(Sample::new(format!("n{i:05}"), "x.jpg").with_label(LabelAssertion::image(if i % 2 == 0 { MAN } else { WOMAN })));
    }
    let oi = DatasetManifest::new("oi", oi);
    let bplan = BalancedPlan { positive_count: 2_500, negative_count: 2_500, seed: 42 };
    let x = balanced_sample(&oi, &bplan).map_err(|e| e.to_string())?;
    let y = balanced_sample(&oi, &bplan).map_err(|e| e.to_string())?;
    if x.ids().ne(y.ids()) {
        return Err("balanced_sample not deterministic".into());
    }
    let pos: BTreeSet<&str> = x.samples.iter().filter(|s| s.ground_truth == ChildPresence::Positive).map(|s| s.id.as_str()).collect();
    let neg: BTreeSet<&str> = x.samples.iter().filter(|s| s.ground_truth == ChildPresence::Negative).map(|s| s.id.as_str()).collect();
    if pos.len() != 2_500 || neg.len() != 2_500 || !pos.is_disjoint(&neg) {
        return Err(format!("balanced gave {}/{}", pos.len(), neg.len()));
    }
    Ok(format!(
        "keyword 9x500 = {} unique ids, identical across runs (seed 43 differs: {differs}); balanced 2500/2500 identical and disjoint",
        a.manifest.len()
    ))
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let checks: Vec<(&str, Box<dyn Fn() -> Result<String, String>>)> = vec![
        ("metrics oracle equivalence", Box::new(check_metrics_oracle)),
        ("published recall/fpr mirror", Box::new(|| check_rate_mirror(&rt))),
        ("flagged proportion mirror", Box::new(|| check_proportion(&rt))),
        ("parser corpus", Box::new(|| check_parser(&rt))),
        ("energy golden rows", Box::new(check_energy)),
        ("cleaning properties", Box::new(check_cleaning)),
        ("auditor planted defects", Box::new(check_auditor)),
        ("resume identity", Box::new(|| check_resume(&rt))),
        ("curation determinism", Box::new(check_curation)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
