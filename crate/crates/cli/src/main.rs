use clap::{Parser, Subcommand};
use omnirl::config::RunConfig;
use omnirl::gradcheck::GradCheckConfig;
use omnirl::orchestrator::{JudgeBackend, Stage};
use omnirl::runtime::{self, CurateArgs, EvalArgs, GenWorldArgs, RemoteSource, ReplayArgs, TrainArgs};
use omnirl::world::ModalitySetting;
use omnirl::Error;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "omnirl", version, about = "Two-stage RL post-training on a symbolic audio-visual world")]
struct Cli {
    /// Run configuration (TOML). Without it the toy preset is used.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the config seed.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct JudgeArgs {
    /// Judge replies cached by an earlier run.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Serve remote-judge requests from the transcript only.
    #[arg(long)]
    offline: bool,
}

impl JudgeArgs {
    fn source(&self) -> RemoteSource {
        RemoteSource { transcript: self.transcript.clone(), offline: self.offline }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a symbolic corpus and its unscored manifest.
    GenWorld {
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score, filter and balance a manifest into stage manifests.
    Curate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_backend)]
        judge: Option<JudgeBackend>,
        /// Write only the stage-2 manifest.
        #[arg(long)]
        stage2: bool,
        #[command(flatten)]
        remote: JudgeArgs,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Restrict prompts to this manifest's ids.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint's policy.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        remote: JudgeArgs,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// AV, V_ONLY or A_ONLY; repeatable.
        #[arg(long = "setting")]
        settings: Vec<ModalitySetting>,
        /// Argmax decoding instead of sampling.
        #[arg(long)]
        greedy: bool,
        /// Also report the contrast-bonus fraction on audio-visual tasks.
        #[arg(long)]
        attention: bool,
    },
    /// Finite-difference check of the optimizer gradient.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-score a rollout log and compare with the logged rewards.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Contrast weight to use instead of the configured one.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_backend(s: &str) -> Result<JudgeBackend, String> {
    match s {
        "oracle" => Ok(JudgeBackend::Oracle),
        "remote" => Ok(JudgeBackend::Remote),
        other => Err(format!("unknown judge backend '{other}' (oracle or remote)")),
    }
}

fn print<T: Serialize>(value: &T) {
    use std::io::Write;
    // a closed pipe (`| head`) is not an error worth a panic
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    if cfg.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global() {
            log::warn!("worker pool already set: {e}");
        }
    }
    match cli.command {
        Command::GenWorld { n, out } => {
            let o = runtime::gen_world(&cfg, &GenWorldArgs { seed: cli.seed, n_tasks: n, out })?;
            print(&o);
        }
        Command::Curate { manifest, corpus, out, judge, stage2, remote } => {
            let args = CurateArgs { manifest, corpus, out, backend: judge, remote: remote.source(), stage2_only: stage2 };
            print(&runtime::curate(&cfg, &args)?);
        }
        Command::Train { stage, corpus, manifest, out, init, resume, max_steps, remote } => {
            let args = TrainArgs { stage, corpus, manifest, out, init, resume, max_steps, remote: remote.source() };
            print(&runtime::train(&cfg, &args)?);
        }
        Command::Eval { checkpoint, corpus, out, settings, greedy, attention } => {
            let args = EvalArgs { checkpoint, corpus, out, settings, greedy, attention };
            let o = runtime::eval(&cfg, &args)?;
            print(&serde_json::json!({ "summaries": o.summaries, "attention": o.attention, "files": o.files }));
        }
        Command::GradCheck { cases, out } => {
            let gc = GradCheckConfig { cases, seed: cfg.seed, ..GradCheckConfig::default() };
            let report = runtime::grad_check(&gc, out.as_deref())?;
            print(&serde_json::json!({
                "passed": report.passed,
                "max_rel_error": report.max_rel_error,
                "cases": report.results.len(),
            }));
        }
        Command::Replay { log, corpus, alpha, out } => {
            let args = ReplayArgs { log, corpus, alpha, out };
            let report = runtime::replay_report(&cfg, &args)?;
            for m in &report.mismatches {
                eprintln!(
                    "line {}: {} {} #{}: field {} logged {:?} recomputed {:?}",
                    m.line, m.prompt_id, m.setting, m.rollout_idx, m.field, m.logged, m.recomputed
                );
            }
            print(&serde_json::json!({
                "records": report.records,
                "checked": report.checked,
                "skipped": report.skipped,
                "mismatches": report.mismatches.len(),
            }));
            if let Some(first) = report.mismatches.first() {
                return Err(Error::ReplayMismatch { mismatches: report.mismatches.len(), first_line: first.line });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
