//! `deliberag` command-line pipeline: ingest, run, metrics, report.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | I/O or other failure |
//! | 2 | invalid config, arguments or manifest |
//! | 3 | backend failure |
//! | 4 | discussion failure (a partial transcript is written when a round completed) |
//! | 5 | transcript or metrics file fails schema validation |
//! | 6 | transcript and metrics come from different runs |

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use deliberag_core::agents::{apply_overrides, default_roles};
use deliberag_core::backend::{self, Backend, BackendError, BackendMode};
use deliberag_core::corpus::{self, Category, Corpus};
use deliberag_core::discussion::{Discussion, DiscussionError, Transcript};
use deliberag_core::index::{build_index, IndexError, VectorIndex};
use deliberag_core::metrics::{compute_metrics, MetricsBundle, MetricsError, RelevanceLabels};
use deliberag_core::report::{compile_report, render_markdown, ReportError};

pub use config::{RunConfig, DEFAULT_TASK};

pub const CORPUS_FILE: &str = "corpus.json";
pub const INDEX_FILE: &str = "index.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SERIES_FILE: &str = "metrics.csv";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_JSON_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "deliberag", version, about = "Document-grounded multi-agent deliberation pipeline")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use the offline mock backend regardless of the config.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Scripted mock replies (JSON: role id to list of replies).
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and chunk the corpus, then embed it into an index.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the discussion and write the transcript.
    Run {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Ingest first instead of reading the corpus and index files.
        #[arg(long)]
        build_index: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compute the metrics bundle for a transcript.
    Metrics {
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Relevance labels (JSON: role id to list of chunk ids).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Compile the compliance report.
    Report {
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(1, format!("{}: {e}", path.display()))
}

fn backend_code(e: &BackendError) -> i32 {
    match e.root() {
        BackendError::Config(_) => 2,
        _ => 3,
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::new(backend_code(&e), e.to_string())
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p).map_err(|m| CliError::new(2, m))?,
            None => RunConfig::default(),
        };
        if cli.mock {
            cfg.backend.mode = BackendMode::Mock;
        }
        if let Some(s) = &cli.mock_script {
            cfg.backend.mock_script = Some(s.clone());
        }
        cfg.backend = cfg.backend.with_env_override();
        cfg.validate().map_err(|m| CliError::new(2, m))?;
        let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        Ok(Self { cfg, out })
    }

    fn backend(&self) -> Result<Box<dyn Backend>, CliError> {
        Ok(backend::from_config(&self.cfg.backend)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn manifest(&self, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| self.cfg.manifest.clone())
            .ok_or_else(|| CliError::new(2, "no manifest: pass --manifest or set `manifest` in the config"))
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Ingest { manifest } => {
            let manifest = ctx.manifest(manifest)?;
            ingest(&ctx, &manifest).map(|_| ())
        }
        Command::Run {
            task,
            rounds,
            build_index,
            manifest,
        } => cmd_run(&ctx, task.as_deref(), *rounds, *build_index, manifest),
        Command::Metrics { transcript, labels } => cmd_metrics(&ctx, transcript, labels),
        Command::Report { transcript, metrics } => cmd_report(&ctx, transcript, metrics),
    }
}

fn ingest(ctx: &Context, manifest: &Path) -> Result<(Corpus, VectorIndex), CliError> {
    let corpus = corpus::load_manifest(manifest).map_err(|e| CliError::new(2, e.to_string()))?;
    let max_age = Duration::from_secs(ctx.cfg.max_manifest_age_days * 86_400);
    if let Some(w) = corpus::staleness_warning(manifest, max_age) {
        eprintln!("warning: {w}");
    }
    let corpus = corpus::chunk_corpus(corpus, &ctx.cfg.chunking).map_err(|e| CliError::new(2, e.to_string()))?;
    let backend = ctx.backend()?;
    let index = build_index(&corpus, backend.as_ref()).map_err(|e| match e {
        IndexError::Backend { ref source, .. } => CliError::new(backend_code(source), e.to_string()),
        other => CliError::new(2, other.to_string()),
    })?;
    ctx.write(CORPUS_FILE, &corpus.to_json())?;
    ctx.write(INDEX_FILE, &index.to_json())?;
    let per_cat: Vec<String> = Category::ALL
        .iter()
        .map(|&c| {
            let n = corpus.chunks.iter().filter(|ch| ch.category == c).count();
            format!("{}: {n}", c.as_str())
        })
        .collect();
    println!(
        "ingested {} documents into {} chunks ({}); index dim {}",
        corpus.documents.len(),
        corpus.chunks.len(),
        per_cat.join(", "),
        index.dim()
    );
    Ok((corpus, index))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_ingested(ctx: &Context) -> Result<(Corpus, VectorIndex), CliError> {
    let (cp, ip) = (ctx.path(CORPUS_FILE), ctx.path(INDEX_FILE));
    if !cp.exists() || !ip.exists() {
        return Err(CliError::new(
            2,
            format!("{} or {} missing; run `ingest` first or pass --build-index", cp.display(), ip.display()),
        ));
    }
    let corpus = Corpus::from_json(&read(&cp)?).map_err(|e| CliError::new(2, e.to_string()))?;
    let index = VectorIndex::from_json(&read(&ip)?).map_err(|e| CliError::new(2, e.to_string()))?;
    Ok((corpus, index))
}

fn discussion_code(e: &DiscussionError) -> i32 {
    match e {
        DiscussionError::InvalidConfig(_) | DiscussionError::Corpus(_) => 2,
        _ => 4,
    }
}

fn cmd_run(
    ctx: &Context,
    task: Option<&str>,
    rounds: Option<usize>,
    build: bool,
    manifest: &Option<PathBuf>,
) -> Result<(), CliError> {
    let mut dc = ctx.cfg.discussion.clone();
    if let Some(t) = task {
        dc.task = t.to_string();
    }
    if dc.task.trim().is_empty() {
        dc.task = DEFAULT_TASK.to_string();
    }
    if let Some(r) = rounds {
        dc.rounds = r;
    }
    dc.temperature = ctx.cfg.backend.temperature;
    dc.validate().map_err(|e| CliError::new(2, e.to_string()))?;

    let manifest_path = manifest.clone().or_else(|| ctx.cfg.manifest.clone());
    let (corpus, index) = if build {
        let m = manifest_path
            .clone()
            .ok_or_else(|| CliError::new(2, "--build-index needs a manifest (--manifest or config)"))?;
        ingest(ctx, &m)?
    } else {
        load_ingested(ctx)?
    };
    let manifest_label = manifest_path.map_or_else(|| CORPUS_FILE.to_string(), |p| p.display().to_string());

    let backend = ctx.backend()?;
    let roles = apply_overrides(default_roles(), &ctx.cfg.roles);
    let discussion = Discussion::with_roles(&dc, roles, &corpus, &index, backend.as_ref())
        .map_err(|e| CliError::new(discussion_code(&e), e.to_string()))?
        .with_manifest(manifest_label);

    let (transcript, failure) = match discussion.run() {
        Ok(t) => (Some(t), None),
        Err(f) => (f.partial, Some(f.error)),
    };
    if let Some(t) = &transcript {
        for line in round_summaries(t) {
            println!("{line}");
        }
        let path = ctx.write(TRANSCRIPT_FILE, &t.to_json())?;
        if t.stopped_early {
            println!("stopped early after {} rounds", t.completed_rounds);
        }
        println!("transcript: {}", path.display());
    }
    match failure {
        None => Ok(()),
        Some(e) => {
            let note = if transcript.is_some() { " (partial transcript written)" } else { "" };
            Err(CliError::new(discussion_code(&e), format!("{e}{note}")))
        }
    }
}

/// `round 3/10 Intelligence: RCA=AGREE SEA=DISAGREE`
pub fn round_summaries(t: &Transcript) -> Vec<String> {
    t.rounds
        .iter()
        .map(|r| {
            let phase = r.turns.first().map(|x| x.phase.to_string()).unwrap_or_default();
            let ds: Vec<String> = r
                .turns
                .iter()
                .map(|x| {
                    let flag = if x.decision.parse_warning { "?" } else { "" };
                    format!("{}={}{flag}", x.role_id, x.decision.value)
                })
                .collect();
            format!("round {}/{} {phase}: {}", r.round_index, t.config.rounds, ds.join(" "))
        })
        .collect()
}

fn load_transcript(path: &Path) -> Result<Transcript, CliError> {
    let t = Transcript::from_json(&read(path)?)
        .map_err(|m| CliError::new(5, format!("{}: {m}", path.display())))?;
    t.validate().map_err(|m| CliError::new(5, format!("{}: {m}", path.display())))?;
    Ok(t)
}

fn load_labels(path: &Path) -> Result<RelevanceLabels, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::new(2, format!("labels {}: {e}", path.display())))
}

fn metrics_err(e: MetricsError) -> CliError {
    match e {
        MetricsError::Backend(b) => b.into(),
        MetricsError::EmptyTranscript | MetricsError::Schema(_) => CliError::new(5, e.to_string()),
        other => CliError::new(1, other.to_string()),
    }
}

fn cmd_metrics(ctx: &Context, transcript: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<(), CliError> {
    let tp = transcript.clone().unwrap_or_else(|| ctx.path(TRANSCRIPT_FILE));
    let t = load_transcript(&tp)?;
    let labels = match labels.clone().or_else(|| ctx.cfg.labels.clone()) {
        Some(p) => Some(load_labels(&p)?),
        None => None,
    };
    let backend = ctx.backend()?;
    let bundle = compute_metrics(&t, backend.as_ref(), labels.as_ref()).map_err(metrics_err)?;
    if let Some(prf) = &bundle.prf {
        for id in &prf.unknown_label_ids {
            eprintln!("warning: label id {id} is not in the corpus; ignored");
        }
    }
    let path = ctx.write(METRICS_FILE, &bundle.to_json())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for row in bundle.series_rows() {
        w.serialize(row).map_err(|e| CliError::new(1, e.to_string()))?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| CliError::new(1, e.to_string()))?)
        .map_err(|e| CliError::new(1, e.to_string()))?;
    ctx.write(SERIES_FILE, &csv)?;

    println!(
        "agreement rate {:.3} over {} rounds; final drift {:.3}; {} parse warning(s)",
        bundle.agreement.overall_rate,
        bundle.agreement.per_round.len(),
        bundle.drift.per_round_drift.last().copied().unwrap_or(0.0),
        bundle.agreement.parse_warnings
    );
    if let Some(o) = bundle.prf.as_ref().and_then(|p| p.overall) {
        println!("retrieval precision {:.3} recall {:.3} f1 {:.3}", o.precision, o.recall, o.f1);
    }
    println!("metrics: {}", path.display());
    Ok(())
}

fn cmd_report(ctx: &Context, transcript: &Option<PathBuf>, metrics: &Option<PathBuf>) -> Result<(), CliError> {
    let tp = transcript.clone().unwrap_or_else(|| ctx.path(TRANSCRIPT_FILE));
    let mp = metrics.clone().unwrap_or_else(|| ctx.path(METRICS_FILE));
    let t = load_transcript(&tp)?;
    let m = MetricsBundle::from_json(&read(&mp)?)
        .map_err(|e| CliError::new(5, format!("{}: {e}", mp.display())))?;
    let hash = t.content_hash();
    if m.transcript_hash != hash {
        return Err(CliError::new(
            6,
            format!("{} was computed from a different transcript than {}", mp.display(), tp.display()),
        ));
    }
    let backend = ctx.backend()?;
    let report = compile_report(&t, &m, backend.as_ref(), ctx.cfg.relevance_threshold).map_err(|e| match e {
        ReportError::TranscriptMetricsMismatch { .. } => CliError::new(6, e.to_string()),
        ReportError::Backend { ref source, .. } => CliError::new(backend_code(source), e.to_string()),
        other => CliError::new(5, other.to_string()),
    })?;
    ctx.write(REPORT_JSON_FILE, &report.to_json())?;
    let md = ctx.write(REPORT_MD_FILE, &render_markdown(&report))?;
    println!("{}", report.verdict.banner());
    println!("{}", report.verdict_rationale);
    println!("report: {}", md.display());
    Ok(())
}
