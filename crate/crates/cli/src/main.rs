use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kindersafe::auditor::{audit_manifest, AuditConfig, AuditFinding};
use kindersafe::cleaning::{dedup, similarity_filter, CleaningConfig, ConstantScorer, HttpScorer};
use kindersafe::curation::{balanced_sample, export_review_batch, keyword_sample, BalancedPlan, KeywordPlan};
use kindersafe::detector::{
    build_removal_manifest, classify_manifest, latest_by_sample, read_log, DecisionRecord, QuarantinePolicy,
    RemovalManifest, RunConfig, DECISIONS_FILE,
};
use kindersafe::energy::{measure_or_estimate, EnergyModel, RateTable};
use kindersafe::images::LocalImages;
use kindersafe::manifest::{load_manifest, save_manifest, DatasetManifest, ManifestFormat};
use kindersafe::metrics::{confusion, metrics_from_counts, sweep_report, MetricsReport};
use kindersafe::prompts::PromptRegistry;
use kindersafe::review::{export_decisions, ReviewQueue, ReviewStore, QUEUE_FILE, REVIEW_LOG_FILE};
use kindersafe::vqa::{Category, EndpointConfig, HttpBackend, MockBackend, MockBackendConfig, VqaBackend, AUTH_TOKEN_ENV};
use kindersafe_review::ServiceConfig;
use serde::Deserialize;

const REMOVAL_FILE: &str = "removal.json";
const FINDINGS_FILE: &str = "findings.jsonl";

#[derive(Parser)]
#[command(name = "kindersafe", version, about = "Find and filter images of children in image datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manifest conversion.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Near-duplicate and caption-similarity cleaning.
    Clean(CleanArgs),
    /// Ask the vision-language backend about every sample.
    Classify(ClassifyArgs),
    /// Recall/FPR of a run against ground truth.
    Evaluate(EvaluateArgs),
    /// Annotation-consistency findings.
    Audit(AuditArgs),
    /// Benchmark samplers.
    #[command(subcommand)]
    Sample(SampleCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    /// Rebuild the removal manifest from a run and its review log.
    Removal(RemovalArgs),
    /// Serve the review queue of a run over HTTP.
    ReviewServe(ReviewServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceFormat {
    Jsonl,
    OpenimagesCsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetFormat {
    Jsonl,
}

#[derive(Subcommand)]
enum ManifestCmd {
    Convert {
        #[arg(long, value_enum)]
        from: SourceFormat,
        #[arg(long, value_enum, default_value = "jsonl")]
        to: TargetFormat,
        /// Source file, or directory for Open Images CSVs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail on any malformed record instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    sim_threshold: f64,
    #[arg(long, default_value_t = 8)]
    hamming: u32,
    /// Similarity endpoint; without it the similarity step is skipped.
    #[arg(long)]
    scorer_endpoint: Option<String>,
    #[arg(long, default_value = "clip")]
    scorer_model: String,
    #[arg(long, default_value = ".")]
    image_root: PathBuf,
    /// Cleaning report; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuarantineArg {
    Keep,
    Remove,
}

impl From<QuarantineArg> for QuarantinePolicy {
    fn from(q: QuarantineArg) -> Self {
        match q {
            QuarantineArg::Keep => QuarantinePolicy::Keep,
            QuarantineArg::Remove => QuarantinePolicy::Remove,
        }
    }
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    prompt: u32,
    /// Registry with extra prompts (JSON array of {index, text, flags}).
    #[arg(long)]
    prompts_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "llava-v1.6-vicuna-7b")]
    model: String,
    #[arg(long, default_value = "detail")]
    category: Category,
    /// Run config file: `{"mock": {...}, "endpoint": {...}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_concurrency: Option<usize>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long, value_enum, default_value = "remove")]
    quarantine: QuarantineArg,
    /// Stop after this many new decisions.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = ".")]
    image_root: PathBuf,
    #[arg(long, default_value_t = 50)]
    page_size: usize,
}

#[derive(Debug, Default, Deserialize)]
struct RunFile {
    #[serde(default)]
    mock: Option<MockBackendConfig>,
    #[serde(default)]
    endpoint: Option<EndpointConfig>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Markdown rendering; defaults to `<out>` with an `.md` extension.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// The manifest was not filtered for depictions.
    #[arg(long)]
    allow_depictions: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SampleCmd {
    Keywords {
        #[arg(long)]
        manifest: PathBuf,
        /// Keyword plan JSON; defaults to the shipped Portuguese plan.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        per_category: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Balanced {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        pos: usize,
        #[arg(long, default_value_t = 50_000)]
        neg: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    ReviewBatch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Energy and CO2-eq for a run.
    Energy {
        #[arg(long)]
        run: PathBuf,
        /// Rate table; defaults to the shipped one.
        #[arg(long)]
        rates: Option<PathBuf>,
        /// Model rate to use; defaults to the run's model.
        #[arg(long)]
        model: Option<String>,
        /// Device power; without it the table estimate is used.
        #[arg(long)]
        watts: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt-by-run table from several evaluation reports.
    Sweep {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RemovalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Review log; defaults to `<run>/review.jsonl` when present.
    #[arg(long)]
    review: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "remove")]
    quarantine: QuarantineArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReviewServeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = kindersafe_review::DEFAULT_BIND)]
    bind: SocketAddr,
    #[arg(long, default_value = ".")]
    image_root: PathBuf,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let loaded = load_manifest(path, ManifestFormat::Jsonl).with_context(|| format!("loading {}", path.display()))?;
    for e in &loaded.report.errors {
        tracing::warn!(line = e.line, reason = %e.reason, "skipped malformed record");
    }
    Ok(loaded.manifest)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    let path = if path.is_dir() { path.join(DECISIONS_FILE) } else { path.to_path_buf() };
    let (_, records, _) = read_log(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(latest_by_sample(records).into_values().collect())
}

fn manifest_convert(from: SourceFormat, input: &Path, out: &Path, strict: bool) -> Result<()> {
    let format = match from {
        SourceFormat::Jsonl => ManifestFormat::Jsonl,
        SourceFormat::OpenimagesCsv => ManifestFormat::OpenImagesCsv,
    };
    let loaded = load_manifest(input, format)?;
    for e in &loaded.report.errors {
        eprintln!("{}:{}: {}", e.file, e.line, e.reason);
    }
    if !loaded.report.unknown_classes.is_empty() {
        eprintln!("unknown classes kept: {}", loaded.report.unknown_classes.iter().cloned().collect::<Vec<_>>().join(", "));
    }
    let manifest = if strict { loaded.strict()? } else { loaded.manifest };
    save_manifest(&manifest, out)?;
    println!("{} samples written to {}", manifest.len(), out.display());
    Ok(())
}

fn clean(args: &CleanArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let images = LocalImages::new(&args.image_root);
    let mut config = CleaningConfig { similarity_threshold: args.sim_threshold, hamming_threshold: args.hamming, embedding_backend: None };
    if let Some(url) = &args.scorer_endpoint {
        let mut endpoint = EndpointConfig::new(url.clone(), args.scorer_model.clone(), Category::Detailed);
        endpoint.auth_token = std::env::var(AUTH_TOKEN_ENV).ok();
        config.embedding_backend = Some(endpoint);
    }
    let (deduped, first) = dedup(&manifest, &config, &images)?;
    let (cleaned, report) = match &config.embedding_backend {
        Some(endpoint) => {
            let scorer = HttpScorer::new(endpoint.clone(), images.clone())?;
            let (m, second) = similarity_filter(&deduped, &config, &scorer)?;
            (m, first.then(second))
        }
        None => {
            tracing::warn!("no scorer endpoint; similarity filter skipped");
            let (m, second) = similarity_filter(&deduped, &config, &ConstantScorer(1.0))?;
            (m, first.then(second))
        }
    };
    save_manifest(&cleaned, &args.out)?;
    let report_path = args.report.clone().unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&report_path, &report)?;
    println!(
        "kept {} of {} ({} duplicates, {} low similarity, {} quarantined)",
        cleaned.len(),
        manifest.len(),
        report.removed_duplicates.iter().map(|g| g.removed_ids.len()).sum::<usize>(),
        report.removed_low_similarity.len(),
        report.quarantined.len()
    );
    Ok(())
}

fn backend_for(args: &ClassifyArgs) -> Result<Box<dyn VqaBackend>> {
    let file: RunFile = match &args.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunFile::default(),
    };
    match args.backend {
        BackendKind::Mock => {
            let cfg = file.mock.unwrap_or_default();
            Ok(Box::new(MockBackend::new(cfg)?.named(args.model.clone(), args.category)))
        }
        BackendKind::Http => {
            let mut endpoint = match (file.endpoint, &args.endpoint) {
                (_, Some(url)) => EndpointConfig::new(url.clone(), args.model.clone(), args.category),
                (Some(e), None) => e,
                (None, None) => bail!("--backend http needs --endpoint or an endpoint in --config"),
            };
            if let Some(n) = args.max_concurrency {
                endpoint.max_concurrency = n;
            }
            if let Some(t) = args.timeout_ms {
                endpoint.timeout_ms = t;
            }
            if let Some(r) = args.retries {
                endpoint.max_retries = r;
            }
            endpoint.auth_token = std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty());
            Ok(Box::new(HttpBackend::new(endpoint, LocalImages::new(&args.image_root))?))
        }
    }
}

fn review_decisions(path: &Path) -> Result<Vec<kindersafe::review::ReviewDecision>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(export_decisions(&ReviewStore::open(path)?))
}

fn write_run_outputs(
    run_dir: &Path,
    manifest: &DatasetManifest,
    records: &[DecisionRecord],
    policy: QuarantinePolicy,
    page_size: usize,
) -> Result<RemovalManifest> {
    let findings: Vec<AuditFinding> = audit_manifest(manifest, records, &AuditConfig::default())?;
    write_jsonl(&run_dir.join(FINDINGS_FILE), &findings)?;
    let queue = ReviewQueue::flagged(manifest, records, &findings, page_size);
    queue.save(&run_dir.join(QUEUE_FILE))?;
    let adjudications = review_decisions(&run_dir.join(REVIEW_LOG_FILE))?;
    let removal = build_removal_manifest(records, &adjudications, policy)?;
    write_json(&run_dir.join(REMOVAL_FILE), &removal)?;
    Ok(removal)
}

fn classify(args: &ClassifyArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let registry = match &args.prompts_file {
        Some(p) => PromptRegistry::from_file(p)?,
        None => PromptRegistry::builtin(),
    };
    let backend = backend_for(args)?;
    let mut config = RunConfig::new(&args.out);
    config.prompt_index = args.prompt;
    config.quarantine = args.quarantine.into();
    config.limit = args.limit;
    if let Some(n) = args.max_concurrency {
        config.max_in_flight = n;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    let outcome = runtime
        .block_on(classify_manifest(&manifest, &registry, backend.as_ref(), &config))
        .context("classification stopped; re-run the same command to resume")?;
    if !outcome.is_complete() {
        println!(
            "run {}: {} decided, {} pending (limit reached); re-run to continue",
            outcome.run_id,
            outcome.records.len(),
            outcome.pending.len()
        );
        return Ok(());
    }
    let removal = write_run_outputs(&args.out, &manifest, &outcome.records, config.quarantine, args.page_size)?;
    println!(
        "run {}: {} decisions ({} resumed), remove {}, keep {}",
        outcome.run_id,
        outcome.records.len(),
        outcome.resumed,
        removal.remove_ids.len(),
        removal.keep_ids.len()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let records = read_decisions(&args.decisions)?;
    let manifest = read_manifest(&args.manifest)?;
    let truth: HashMap<String, _> = manifest.samples.iter().map(|s| (s.id.clone(), s.ground_truth)).collect();
    let counts = confusion(&records, &truth)?;
    let mut report: MetricsReport<f64> = metrics_from_counts(counts);
    if let Some(first) = records.first() {
        report = report.labeled(first.model_name.clone(), first.category, first.prompt_index);
    }
    write_json(&args.out, &report)?;
    let md = report.to_markdown();
    std::fs::write(args.markdown.clone().unwrap_or_else(|| args.out.with_extension("md")), &md)?;
    print!("{md}");
    Ok(())
}

fn audit(args: &AuditArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let records = match &args.decisions {
        Some(p) => read_decisions(p)?,
        None => Vec::new(),
    };
    let mut config = AuditConfig::default().with_iou(args.iou);
    config.depictions_excluded = !args.allow_depictions;
    let before = manifest.digest();
    let findings = audit_manifest(&manifest, &records, &config)?;
    debug_assert_eq!(before, manifest.digest());
    write_jsonl(&args.out, &findings)?;
    println!("{} findings over {} samples", findings.len(), manifest.len());
    Ok(())
}

fn sample(cmd: &SampleCmd) -> Result<()> {
    match cmd {
        SampleCmd::Keywords { manifest, plan, seed, per_category, out } => {
            let m = read_manifest(manifest)?;
            let mut plan = match plan {
                Some(p) => KeywordPlan::from_file(p)?,
                None => KeywordPlan::default_portuguese(),
            };
            if let Some(s) = seed {
                plan.seed = *s;
            }
            if let Some(n) = per_category {
                plan.per_category = *n;
            }
            let result = keyword_sample(&m, &plan)?;
            for w in &result.warnings {
                eprintln!("warning: category {:?} has {} eligible of {} requested", w.category, w.eligible, w.requested);
            }
            save_manifest(&result.manifest, out)?;
            println!("{} samples written to {}", result.manifest.len(), out.display());
        }
        SampleCmd::Balanced { manifest, pos, neg, seed, out } => {
            let m = read_manifest(manifest)?;
            let plan = BalancedPlan { positive_count: *pos, negative_count: *neg, seed: *seed };
            let result = balanced_sample(&m, &plan)?;
            save_manifest(&result, out)?;
            println!("{} samples written to {}", result.len(), out.display());
        }
        SampleCmd::ReviewBatch { manifest, batch_size, out } => {
            let m = read_manifest(manifest)?;
            let queue = export_review_batch(&m, *batch_size)?;
            queue.save(out)?;
            println!("{} items in {} pages", queue.items.len(), queue.page_count());
        }
    }
    Ok(())
}

fn report(cmd: &ReportCmd) -> Result<()> {
    match cmd {
        ReportCmd::Energy { run, rates, model, watts, out } => {
            let records = read_decisions(run)?;
            if records.is_empty() {
                bail!("no decisions in {}", run.display());
            }
            let table = match rates {
                Some(p) => RateTable::from_file(p)?,
                None => RateTable::shipped(),
            };
            let energy = EnergyModel::<f64>::from_table(&table)?;
            let model_name = model.clone().unwrap_or_else(|| records[0].model_name.clone());
            let durations: Vec<u64> = records.iter().map(|r| r.latency_ms).collect();
            let report = measure_or_estimate(&durations, *watts, &energy, &model_name)?;
            match out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        ReportCmd::Sweep { reports, out } => {
            let mut runs = Vec::new();
            for p in reports {
                let r: MetricsReport<f64> = serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?;
                runs.push(r);
            }
            let md = sweep_report(&runs).to_markdown();
            match out {
                Some(p) => std::fs::write(p, md)?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}

fn removal(args: &RemovalArgs) -> Result<()> {
    let records = read_decisions(&args.run)?;
    let review = args.review.clone().unwrap_or_else(|| args.run.join(REVIEW_LOG_FILE));
    let adjudications = review_decisions(&review)?;
    let removal = build_removal_manifest(&records, &adjudications, args.quarantine.into())?;
    write_json(&args.out.clone().unwrap_or_else(|| args.run.join(REMOVAL_FILE)), &removal)?;
    println!(
        "remove {}, keep {}, {} human overrides",
        removal.remove_ids.len(),
        removal.keep_ids.len(),
        removal.overrides_applied.len()
    );
    Ok(())
}

fn review_serve(args: &ReviewServeArgs) -> Result<()> {
    let mut config = ServiceConfig::for_run(&args.run);
    config.bind = args.bind;
    config.image_root = args.image_root.clone();
    config.static_dir = args.static_dir.clone();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let (addr, server) = kindersafe_review::bind(&config).await?;
        println!("review service on http://{addr}");
        server.await?;
        Ok::<_, anyhow::Error>(())
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Manifest(ManifestCmd::Convert { from, to: TargetFormat::Jsonl, input, out, strict }) => {
            manifest_convert(*from, input, out, *strict)
        }
        Command::Clean(args) => clean(args),
        Command::Classify(args) => classify(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Audit(args) => audit(args),
        Command::Sample(cmd) => sample(cmd),
        Command::Report(cmd) => report(cmd),
        Command::Removal(args) => removal(args),
        Command::ReviewServe(args) => review_serve(args),
    }
}
