//! Command implementations behind the CLI. Every command reads its inputs
//! from explicit paths and writes only under its output directory.

use crate::config::{ConfigError, RunConfig};
use crate::curation::{
    read_manifest, run_pipeline, write_manifest, CurationError, CurationJudge, Dimension, OracleCurator, SampleRecord,
};
use crate::eval::{attention_fraction, evaluate, AttentionReport, Decoding, EvalError, EvalSummary};
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::gspo::{GspoError, StepStats};
use crate::judge::{JudgeError, Judger, OfflineTransport, OracleJudger, RemoteJudger, Transport};
use crate::orchestrator::{
    reward_context, JudgeBackend, OrchestratorError, RolloutRecord, Stage, StageRunner, TrainState,
};
use crate::policy::{FactoredCategoricalPolicy, PolicyError};
use crate::reward::{attention_reward_over, RewardBreakdown, RewardEngine};
use crate::world::{corpus_digest, export_manifest, generate_corpus, ContentStore, GeneratedTask, ModalitySetting, WorldError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Gspo(#[from] GspoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("replay found {mismatches} mismatching record(s); first at line {first_line}")]
    ReplayMismatch { mismatches: usize, first_line: usize },
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheckFailed(f64),
}

fn judge_unavailable(e: &JudgeError) -> bool {
    matches!(e, JudgeError::Unavailable { .. })
}

fn non_finite(e: &GspoError) -> bool {
    matches!(e, GspoError::NonFinite { .. } | GspoError::ParamOverflow { .. })
}

impl Error {
    /// 0 ok, 1 usage, 2 data, 3 judge unavailable, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Judge(e) if judge_unavailable(e) => 3,
            Error::Orchestrator(OrchestratorError::JudgeUnavailable { .. }) => 3,
            Error::Gspo(e) | Error::Orchestrator(OrchestratorError::Gspo(e)) if non_finite(e) => 4,
            Error::GradCheckFailed(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(format!("create {}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(format!("write {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(format!("read {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let f = File::open(path).map_err(io_err(format!("open {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(format!("read {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn jsonl_writer(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(format!("open {}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(value).expect("serializable")).map_err(io_err(format!("write {}", path.display())))
}

/// Writes the resolved config and its digest into `dir`.
pub fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.resolved.toml"), &cfg.to_toml())?;
    write_text(&dir.join("config.digest"), &(cfg.digest() + "\n"))
}

pub fn write_corpus(tasks: &[GeneratedTask], path: &Path) -> Result<()> {
    let mut w = jsonl_writer(path, false)?;
    for t in tasks {
        write_line(&mut w, t, path)?;
    }
    w.flush().map_err(io_err(format!("write {}", path.display())))
}

pub fn read_corpus(path: &Path) -> Result<Vec<GeneratedTask>> {
    let tasks: Vec<GeneratedTask> = read_jsonl(path)?.into_iter().map(|(_, t)| t).collect();
    if tasks.is_empty() {
        return Err(Error::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(tasks)
}

fn corpus_path(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.corpus.clone())
        .ok_or_else(|| Error::Usage("no corpus given (use --corpus or paths.corpus)".into()))
}

// ---------------------------------------------------------------- gen-world

#[derive(Debug, Clone, Default)]
pub struct GenWorldArgs {
    pub seed: Option<u64>,
    pub n_tasks: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenWorldOutput {
    pub corpus: PathBuf,
    pub manifest: PathBuf,
    pub tasks: usize,
    pub digest: String,
}

pub fn gen_world(cfg: &RunConfig, args: &GenWorldArgs) -> Result<GenWorldOutput> {
    let mut params = cfg.world.clone();
    if let Some(n) = args.n_tasks {
        params.n_tasks = n;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let tasks = generate_corpus(seed, &params)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    create_dir(&dir)?;
    let corpus = dir.join("corpus.jsonl");
    let manifest = dir.join("manifest.jsonl");
    write_corpus(&tasks, &corpus)?;
    write_manifest(&export_manifest(&tasks), &manifest)?;
    let mut resolved = cfg.clone();
    resolved.seed = seed;
    resolved.world = params;
    write_resolved_config(&resolved, &dir)?;
    let digest = corpus_digest(&tasks);
    write_text(&dir.join("corpus.digest"), &(digest.clone() + "\n"))?;
    Ok(GenWorldOutput { corpus, manifest, tasks: tasks.len(), digest })
}

// ---------------------------------------------------------------- judges

/// How a remote judge is reached.
#[derive(Debug, Clone, Default)]
pub struct RemoteSource {
    /// Replies cached by an earlier run; loaded before any call.
    pub transcript: Option<PathBuf>,
    /// Serve only from the transcript; any uncached request fails.
    pub offline: bool,
}

/// Transport chosen at run time: cache-only or HTTP.
pub enum AnyTransport {
    Offline(OfflineTransport),
    #[cfg(feature = "http")]
    Http(crate::judge::HttpTransport),
}

impl Transport for AnyTransport {
    fn post(&self, body: &str, timeout: std::time::Duration) -> Result<String, crate::judge::TransportError> {
        match self {
            AnyTransport::Offline(t) => t.post(body, timeout),
            #[cfg(feature = "http")]
            AnyTransport::Http(t) => t.post(body, timeout),
        }
    }
}

fn remote_judger(cfg: &RunConfig, source: &RemoteSource) -> Result<Arc<RemoteJudger<AnyTransport>>> {
    #[cfg(feature = "http")]
    let transport = if source.offline {
        AnyTransport::Offline(OfflineTransport)
    } else {
        let token = std::env::var(&cfg.judge.token_env).ok();
        AnyTransport::Http(crate::judge::HttpTransport::new(&cfg.judge.endpoint, token))
    };
    #[cfg(not(feature = "http"))]
    let transport = {
        if !source.offline {
            log::warn!("built without http support; serving the judge from the transcript only");
        }
        AnyTransport::Offline(OfflineTransport)
    };
    let judger = RemoteJudger::new(transport, cfg.judge.clone());
    if let Some(path) = &source.transcript {
        let n = judger.load_transcript(path).map_err(io_err(format!("load transcript {}", path.display())))?;
        log::info!("loaded {n} cached judge replies from {}", path.display());
    }
    Ok(Arc::new(judger))
}

// ---------------------------------------------------------------- curate

#[derive(Debug, Clone, Default)]
pub struct CurateArgs {
    pub manifest: Option<PathBuf>,
    /// Needed by the oracle backend to resolve content.
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: Option<JudgeBackend>,
    pub remote: RemoteSource,
    /// Write only the stage-2 manifest.
    pub stage2_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateOutput {
    pub input: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub histogram: BTreeMap<String, usize>,
    pub files: Vec<PathBuf>,
}

/// Counts judge calls that returned a value.
struct Tally<'a> {
    inner: &'a dyn CurationJudge,
    answered: AtomicUsize,
    last: Mutex<Option<String>>,
}

impl Tally<'_> {
    fn note<T>(&self, r: std::result::Result<T, JudgeError>) -> std::result::Result<T, JudgeError> {
        match &r {
            Ok(_) => {
                self.answered.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) => *self.last.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string()),
        }
        r
    }
}

impl CurationJudge for Tally<'_> {
    fn score_dimension(&self, record: &SampleRecord, dim: Dimension) -> std::result::Result<f64, JudgeError> {
        self.note(self.inner.score_dimension(record, dim))
    }

    fn categorize(&self, record: &SampleRecord, taxonomy: &[String]) -> std::result::Result<String, JudgeError> {
        self.note(self.inner.categorize(record, taxonomy))
    }
}

pub fn curate(cfg: &RunConfig, args: &CurateArgs) -> Result<CurateOutput> {
    let manifest = args
        .manifest
        .clone()
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Usage("no manifest given (use --manifest or paths.manifest)".into()))?;
    let records = read_manifest(&manifest)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    create_dir(&dir)?;
    let backend = args.backend.unwrap_or(cfg.stage.judge);
    let mut remote = None;
    let judge: Arc<dyn CurationJudge> = match backend {
        JudgeBackend::Oracle => {
            let tasks = read_corpus(&corpus_path(cfg, args.corpus.as_deref())?)?;
            Arc::new(OracleCurator::new(Arc::new(ContentStore::new(tasks)), &cfg.curation))
        }
        JudgeBackend::Remote => {
            let j = remote_judger(cfg, &args.remote)?;
            remote = Some(j.clone());
            j
        }
    };
    let tally = Tally { inner: judge.as_ref(), answered: AtomicUsize::new(0), last: Mutex::new(None) };
    let result = run_pipeline(&records, &tally, &cfg.curation);
    if let Some(j) = &remote {
        let path = dir.join("judge_transcript.jsonl");
        j.save_transcript(&path).map_err(io_err(format!("write {}", path.display())))?;
    }
    // a judge that never answered outranks whatever the empty pipeline reports
    if !records.is_empty() && tally.answered.load(Ordering::SeqCst) == 0 {
        if let Some(last) = tally.last.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(Error::Judge(JudgeError::Unavailable { attempts: cfg.judge.max_attempts, last }));
        }
    }
    let out = result?;
    let mut files = Vec::new();
    if !args.stage2_only {
        let p = dir.join("stage1.jsonl");
        write_manifest(&out.stage1, &p)?;
        files.push(p);
    }
    let p = dir.join("stage2.jsonl");
    write_manifest(&out.stage2, &p)?;
    files.push(p);
    let audit = dir.join("audit.jsonl");
    let mut w = jsonl_writer(&audit, false)?;
    for a in &out.audit {
        write_line(&mut w, a, &audit)?;
    }
    w.flush().map_err(io_err(format!("write {}", audit.display())))?;
    files.push(audit);
    let hist = dir.join("histogram.json");
    write_json(&hist, &out.histogram)?;
    files.push(hist);
    write_resolved_config(cfg, &dir)?;
    Ok(CurateOutput {
        input: records.len(),
        stage1: out.stage1.len(),
        stage2: out.stage2.len(),
        histogram: out.histogram,
        files,
    })
}

// ---------------------------------------------------------------- train

/// Saved training state with enough context to resume or evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_digest: String,
    pub corpus_digest: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Data(format!("checkpoint {} does not exist", path.display())));
        }
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    #[serde(flatten)]
    pub stats: StepStats,
    pub attention_fraction: Option<f64>,
    pub judge_failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub stage: Option<Stage>,
    pub corpus: Option<PathBuf>,
    /// Restrict prompts to the ids in this manifest.
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Start from this checkpoint's policy (its final weights become the
    /// KL reference); the usual way to begin the contrast stage.
    pub init: Option<PathBuf>,
    /// Continue this run's checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps even if `total_steps` is larger.
    pub max_steps: Option<usize>,
    pub remote: RemoteSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub steps_run: usize,
    pub final_step: usize,
    pub final_checkpoint: PathBuf,
    pub last: Option<MetricsRow>,
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.to_string())
}

fn truncate_jsonl_before(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    #[derive(Deserialize)]
    struct StepOnly {
        step: usize,
    }
    // keep the kept lines byte-for-byte
    let text = fs::read_to_string(path).map_err(io_err(format!("read {}", path.display())))?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: StepOnly = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if row.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(format!("write {}", path.display())))
}

fn rewrite_metrics_csv(jsonl: &Path, csv_path: &Path) -> Result<()> {
    let rows: Vec<MetricsRow> = if jsonl.exists() { read_jsonl(jsonl)?.into_iter().map(|(_, r)| r).collect() } else { Vec::new() };
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    w.write_record([
        "stage", "step", "lr", "mean_reward", "mean_abs_advantage", "clip_fraction", "kl", "grad_norm", "objective", "groups",
        "skipped_groups", "attention_fraction", "judge_failures",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        let s = &r.stats;
        w.write_record([
            r.stage.to_string(),
            s.step.to_string(),
            s.lr.to_string(),
            s.mean_reward.to_string(),
            s.mean_abs_advantage.to_string(),
            s.clip_fraction.to_string(),
            s.kl.to_string(),
            s.grad_norm.to_string(),
            s.objective.to_string(),
            s.groups.to_string(),
            s.skipped_groups.to_string(),
            r.attention_fraction.map(|a| a.to_string()).unwrap_or_default(),
            r.judge_failures.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(io_err(format!("write {}", csv_path.display())))
}

fn prompt_ids(tasks: &[GeneratedTask], manifest: Option<&Path>) -> Result<Vec<String>> {
    match manifest {
        None => Ok(tasks.iter().map(|t| t.id.clone()).collect()),
        Some(p) => {
            let ids: Vec<String> = read_manifest(p)?
                .into_iter()
                .map(|r| crate::world::split_content_ref(&r.content_ref).0.to_string())
                .collect();
            if ids.is_empty() {
                return Err(Error::Data(format!("{}: manifest selects no prompts", p.display())));
            }
            Ok(ids)
        }
    }
}

type SharedRemote = Arc<RemoteJudger<AnyTransport>>;

/// Builds the reward judge for training or replay.
pub fn build_judger(
    cfg: &RunConfig,
    store: Arc<ContentStore>,
    backend: JudgeBackend,
    remote: &RemoteSource,
) -> Result<(Arc<dyn Judger>, Option<SharedRemote>)> {
    match backend {
        JudgeBackend::Oracle => Ok((Arc::new(OracleJudger::new(store)), None)),
        JudgeBackend::Remote => {
            let j = remote_judger(cfg, remote)?;
            Ok((j.clone(), Some(j)))
        }
    }
}

fn engine_for(cfg: &RunConfig, judger: Arc<dyn Judger>) -> RewardEngine {
    let mut engine = RewardEngine::new(judger);
    engine.consistency_rules = cfg.rules.consistency.clone();
    engine.completeness_rules = cfg.rules.completeness.clone();
    engine.weights = cfg.rewards;
    engine
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainOutput> {
    let corpus_file = corpus_path(cfg, args.corpus.as_deref())?;
    let tasks = read_corpus(&corpus_file)?;
    let corpus_digest = corpus_digest(&tasks);
    let config_digest = cfg.digest();
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let stage = match (args.stage, &resume) {
        (Some(s), Some(c)) if s != c.stage => {
            return Err(Error::Usage(format!("--stage {s} conflicts with the resumed {} checkpoint", c.stage)))
        }
        (Some(s), _) => s,
        (None, Some(c)) => c.stage,
        (None, None) => return Err(Error::Usage("--stage is required".into())),
    };
    let ids = prompt_ids(&tasks, args.manifest.as_deref())?;
    let store = Arc::new(ContentStore::new(tasks));
    let (judger, remote) = build_judger(cfg, store.clone(), cfg.stage.judge, &args.remote)?;
    let engine = engine_for(cfg, judger);
    let runner =
        StageRunner::new(store, engine, stage, cfg.stage.clone(), cfg.trainer.clone(), cfg.seed, ids)?;

    let out = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    let dir = stage_dir(&out, stage);
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_resolved_config(cfg, &dir)?;

    let mut state = match (&resume, &args.init) {
        (Some(c), _) => {
            if c.config_digest != config_digest {
                return Err(Error::Data(format!(
                    "checkpoint was written under config {} but the current config is {config_digest}",
                    c.config_digest
                )));
            }
            if c.corpus_digest != corpus_digest {
                return Err(Error::Data("checkpoint was written for a different corpus".into()));
            }
            c.state.clone()
        }
        (None, Some(init)) => TrainState::new(Checkpoint::load(init)?.state.policy),
        (None, None) => {
            if stage == Stage::Ma {
                log::warn!("contrast stage started without --init; using an untrained policy");
            }
            TrainState::new(FactoredCategoricalPolicy::new(cfg.policy))
        }
    };
    if state.policy.config != cfg.policy {
        return Err(Error::Data("checkpoint policy schema differs from the configured one".into()));
    }

    let metrics_jsonl = dir.join("metrics.jsonl");
    let metrics_csv = dir.join("metrics.csv");
    let rollouts = dir.join("rollouts.jsonl");
    let appending = resume.is_some();
    if appending {
        truncate_jsonl_before(&metrics_jsonl, state.step)?;
        truncate_jsonl_before(&rollouts, state.step)?;
    }
    let mut metrics_w = jsonl_writer(&metrics_jsonl, appending)?;
    let mut rollouts_w = jsonl_writer(&rollouts, appending)?;

    let end = match args.max_steps {
        Some(m) => cfg.trainer.total_steps.min(state.step + m),
        None => cfg.trainer.total_steps,
    };
    let checkpoint = |state: &TrainState, path: &Path| {
        Checkpoint { stage, config_digest: config_digest.clone(), corpus_digest: corpus_digest.clone(), state: state.clone() }
            .save(path)
    };
    let start = state.step;
    let mut last = None;
    while state.step < end {
        let before = state.clone();
        let step_out = match runner.step(&mut state) {
            Ok(o) => o,
            Err(e) => {
                let path = dir.join("checkpoint-failed.json");
                checkpoint(&before, &path)?;
                log::error!("step {} failed; state saved to {}", before.step, path.display());
                metrics_w.flush().ok();
                rollouts_w.flush().ok();
                // the step error is the one to report
                if let Err(csv_err) = rewrite_metrics_csv(&metrics_jsonl, &metrics_csv) {
                    log::warn!("metrics.csv not rewritten: {csv_err}");
                }
                return Err(e.into());
            }
        };
        for r in &step_out.records {
            write_line(&mut rollouts_w, r, &rollouts)?;
        }
        let row = MetricsRow {
            stage,
            stats: step_out.stats,
            attention_fraction: step_out.attention_fraction,
            judge_failures: step_out.judge_failures,
        };
        write_line(&mut metrics_w, &row, &metrics_jsonl)?;
        log::info!(
            "{stage} step {} reward {:.4} kl {:.5} clip {:.4}",
            row.stats.step,
            row.stats.mean_reward,
            row.stats.kl,
            row.stats.clip_fraction
        );
        last = Some(row);
        if state.step % cfg.checkpoint_every == 0 {
            checkpoint(&state, &ckpt_dir.join(format!("step-{:06}.json", state.step)))?;
        }
    }
    metrics_w.flush().map_err(io_err("write metrics"))?;
    rollouts_w.flush().map_err(io_err("write rollouts"))?;
    rewrite_metrics_csv(&metrics_jsonl, &metrics_csv)?;
    let final_checkpoint = dir.join("final.json");
    checkpoint(&state, &final_checkpoint)?;
    if let Some(j) = remote {
        let path = dir.join("judge_transcript.jsonl");
        j.save_transcript(&path).map_err(io_err(format!("write {}", path.display())))?;
    }
    Ok(TrainOutput { dir, steps_run: state.step - start, final_step: state.step, final_checkpoint, last })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Settings to evaluate; empty means full modality only.
    pub settings: Vec<ModalitySetting>,
    pub greedy: bool,
    /// Also measure the contrast-bonus fraction on audio-visual tasks.
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub summaries: BTreeMap<String, EvalSummary>,
    pub attention: Option<AttentionReport>,
    pub files: Vec<PathBuf>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalOutput> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tasks = read_corpus(&corpus_path(cfg, args.corpus.as_deref())?)?;
    let store = Arc::new(ContentStore::new(tasks.clone()));
    let engine = engine_for(cfg, Arc::new(OracleJudger::new(store.clone())));
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.join("eval"));
    create_dir(&dir)?;
    let decoding = if args.greedy { Decoding::Greedy } else { Decoding::Sample { seed: cfg.seed } };
    let settings = if args.settings.is_empty() { vec![ModalitySetting::Av] } else { args.settings.clone() };
    let policy = &ckpt.state.policy;
    let mut summaries = BTreeMap::new();
    let mut files = Vec::new();
    for s in settings {
        let report = evaluate(policy, &store, &tasks, &engine, s, decoding)?;
        let path = dir.join(format!("eval_{}.csv", s.tag().to_ascii_lowercase()));
        let f = File::create(&path).map_err(io_err(format!("create {}", path.display())))?;
        crate::eval::write_csv(&report.rows, BufWriter::new(f)).map_err(io_err(format!("write {}", path.display())))?;
        files.push(path);
        summaries.insert(s.tag().to_string(), report.summary);
    }
    let attention = if args.attention {
        Some(attention_fraction(policy, &store, &tasks, &engine, cfg.stage.alpha, cfg.attention_samples, cfg.seed)?)
    } else {
        None
    };
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &serde_json::json!({ "summaries": summaries, "attention": attention }))?;
    files.push(summary_path);
    Ok(EvalOutput { summaries, attention, files })
}

// ---------------------------------------------------------------- grad-check

pub fn grad_check(cfg: &GradCheckConfig, out: Option<&Path>) -> Result<GradCheckReport> {
    let report = crate::gradcheck::run(cfg)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("grad_check.json"), &report)?;
    }
    if !report.passed {
        return Err(Error::GradCheckFailed(report.max_rel_error));
    }
    Ok(report)
}

// ---------------------------------------------------------------- replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub line: usize,
    pub prompt_id: String,
    pub setting: ModalitySetting,
    pub rollout_idx: usize,
    pub field: String,
    pub logged: RewardBreakdown,
    pub recomputed: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub checked: usize,
    /// Records whose judge call failed during training.
    pub skipped: usize,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayArgs {
    pub log: PathBuf,
    pub corpus: Option<PathBuf>,
    pub alpha: Option<f64>,
    /// Write the report here.
    pub out: Option<PathBuf>,
}

/// Re-scores every logged rollout under the oracle judge and compares it
/// with the logged breakdown; returns the report without failing.
pub fn replay_report(cfg: &RunConfig, args: &ReplayArgs) -> Result<ReplayReport> {
    let tasks = read_corpus(&corpus_path(cfg, args.corpus.as_deref())?)?;
    let store = Arc::new(ContentStore::new(tasks));
    let engine = engine_for(cfg, Arc::new(OracleJudger::new(store.clone())));
    let alpha = args.alpha.unwrap_or(cfg.stage.alpha);
    let records: Vec<(usize, RolloutRecord)> = read_jsonl(&args.log)?;

    // contrast groups: mean recomputed answer score per setting
    let mut answers: BTreeMap<(usize, usize, ModalitySetting), (f64, usize)> = BTreeMap::new();
    let mut rescored: Vec<Option<(f64, f64)>> = Vec::with_capacity(records.len());
    for (_, r) in &records {
        if r.stage != Stage::Ma {
            rescored.push(None);
            continue;
        }
        let task = store.task(&r.prompt_id)?;
        let ctx = reward_context(task, &r.content_ref);
        let ans = engine.answer_reward(&r.raw_text, &ctx)?;
        let fmt = crate::trace::format_reward(&r.raw_text);
        let e = answers.entry((r.step, r.slot, r.setting)).or_default();
        e.0 += ans;
        e.1 += 1;
        rescored.push(Some((fmt, ans)));
    }
    let mean = |step: usize, slot: usize, s: ModalitySetting| {
        answers.get(&(step, slot, s)).map(|(sum, n)| sum / *n as f64)
    };

    let mut report = ReplayReport { records: records.len(), checked: 0, skipped: 0, mismatches: Vec::new() };
    for ((line, r), pre) in records.iter().zip(rescored) {
        if r.judge_error.is_some() {
            report.skipped += 1;
            continue;
        }
        let task = store.task(&r.prompt_id)?;
        let ctx = reward_context(task, &r.content_ref);
        let recomputed = match r.stage {
            Stage::Qi => engine.qi_reward(&r.raw_text, &ctx)?,
            Stage::Ma => {
                let (fmt, ans) = pre.expect("scored above");
                if r.trains {
                    let full = mean(r.step, r.slot, ModalitySetting::Av).unwrap_or(0.0);
                    let ablated: Vec<f64> = ModalitySetting::ALL[1..]
                        .iter()
                        .filter_map(|s| mean(r.step, r.slot, *s))
                        .collect();
                    let attn = attention_reward_over(full, &ablated, alpha);
                    engine.ma_reward(&r.raw_text, &ctx, attn)?
                } else {
                    RewardBreakdown::ma(fmt, ans, 0.0, &engine.weights)
                }
            }
        };
        report.checked += 1;
        if let Some(field) = r.breakdown.first_difference(&recomputed, 0.0) {
            report.mismatches.push(Mismatch {
                line: *line,
                prompt_id: r.prompt_id.clone(),
                setting: r.setting,
                rollout_idx: r.rollout_idx,
                field: field.to_string(),
                logged: r.breakdown,
                recomputed,
            });
        }
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join("replay.json"), &report)?;
    }
    Ok(report)
}

/// As [`replay_report`], failing when any record differs.
pub fn replay(cfg: &RunConfig, args: &ReplayArgs) -> Result<ReplayReport> {
    let report = replay_report(cfg, args)?;
    if let Some(first) = report.mismatches.first() {
        return Err(Error::ReplayMismatch { mismatches: report.mismatches.len(), first_line: first.line });
    }
    Ok(report)
}
