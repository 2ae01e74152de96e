use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn omnirl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnirl")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> serde_json::Value {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

/// Small run: 6 steps of 4 prompts, checkpoints every 2 steps.
fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(
        &p,
        "checkpoint_every = 2\n[trainer]\ntotal_steps = 6\nbatch_prompts = 4\n[world]\nn_tasks = 24\n",
    )
    .unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    ok(omnirl(dir, &["-c", cfg.to_str().unwrap(), "gen-world", "-o", out]));
    dir.join(out).join("corpus.jsonl")
}

#[test]
fn help_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&omnirl(d.path(), &["--help"])), 0);
    assert_eq!(code(&omnirl(d.path(), &["no-such-command"])), 1);
    assert_eq!(code(&omnirl(d.path(), &["train", "--stage", "sideways"])), 1);
    // resolved configs are TOML, whose integers are signed
    assert_eq!(code(&omnirl(d.path(), &["--seed", "18446744073709551615", "gen-world"])), 1);
    // train without a stage
    let corpus = gen(d.path(), &small_config(d.path()), "w");
    assert_eq!(code(&omnirl(d.path(), &["train", "--corpus", corpus.to_str().unwrap()])), 1);
}

#[test]
fn data_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&omnirl(d.path(), &["gen-world", "-n", "0", "-o", "w"])), 2);
    assert_eq!(code(&omnirl(d.path(), &["eval", "--checkpoint", "missing.json"])), 2);
    fs::write(d.path().join("bad.toml"), "[trainer]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&omnirl(d.path(), &["-c", "bad.toml", "gen-world"])), 2);
}

#[test]
fn gen_world_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let a = ok(omnirl(d.path(), &["--seed", "11", "gen-world", "-n", "30", "-o", "a"]));
    let b = ok(omnirl(d.path(), &["--seed", "11", "gen-world", "-n", "30", "-o", "b"]));
    let c = ok(omnirl(d.path(), &["--seed", "12", "gen-world", "-n", "30", "-o", "c"]));
    assert_eq!(a["digest"], b["digest"]);
    assert_ne!(a["digest"], c["digest"]);
    assert_eq!(fs::read(d.path().join("a/corpus.jsonl")).unwrap(), fs::read(d.path().join("b/corpus.jsonl")).unwrap());
}

#[test]
fn contrast_stage_refuses_corpus_without_audio_visual_tasks() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let corpus = gen(d.path(), &cfg, "w");
    let kept: Vec<String> = fs::read_to_string(&corpus)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"modality_requirement\":\"AV\""))
        .map(str::to_string)
        .collect();
    assert!(!kept.is_empty());
    fs::write(d.path().join("unimodal.jsonl"), kept.join("\n") + "\n").unwrap();
    let o = omnirl(d.path(), &["-c", cfg.to_str().unwrap(), "train", "--stage", "ma", "--corpus", "unimodal.jsonl"]);
    assert_eq!(code(&o), 2, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let c = cfg.to_str().unwrap();
    let corpus = gen(d.path(), &cfg, "w");
    let corpus = corpus.to_str().unwrap();
    ok(omnirl(d.path(), &["-c", c, "train", "--stage", "qi", "--corpus", corpus, "-o", "full"]));
    ok(omnirl(d.path(), &["-c", c, "train", "--stage", "qi", "--corpus", corpus, "-o", "part", "--max-steps", "4"]));
    let out = ok(omnirl(
        d.path(),
        &["-c", c, "train", "--corpus", corpus, "-o", "part", "--resume", "part/qi/checkpoints/step-000002.json"],
    ));
    assert_eq!(out["final_step"], 6);
    for f in ["final.json", "metrics.jsonl", "rollouts.jsonl", "metrics.csv"] {
        let a = fs::read(d.path().join("full/qi").join(f)).unwrap();
        let b = fs::read(d.path().join("part/qi").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
    // a different config is rejected
    fs::write(d.path().join("other.toml"), fs::read_to_string(&cfg).unwrap().replace("batch_prompts = 4", "batch_prompts = 3"))
        .unwrap();
    let o = omnirl(d.path(), &["-c", "other.toml", "train", "--corpus", corpus, "-o", "part", "--resume", "part/qi/final.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn replay_detects_tampering_and_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let c = cfg.to_str().unwrap();
    let corpus = gen(d.path(), &cfg, "w");
    let corpus = corpus.to_str().unwrap();
    ok(omnirl(d.path(), &["-c", c, "train", "--stage", "qi", "--corpus", corpus, "-o", "r"]));
    ok(omnirl(
        d.path(),
        &["-c", c, "train", "--stage", "ma", "--corpus", corpus, "-o", "r", "--init", "r/qi/final.json"],
    ));
    for stage in ["qi", "ma"] {
        let log = format!("r/{stage}/rollouts.jsonl");
        let rep = ok(omnirl(d.path(), &["-c", c, "replay", "--log", &log, "--corpus", corpus]));
        assert_eq!(rep["mismatches"], 0, "{stage}");
        assert!(rep["checked"].as_u64().unwrap() > 0);
    }
    let log = d.path().join("r/qi/rollouts.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let mut v2 = v.clone();
    v2["breakdown"]["total"] = serde_json::json!(v["breakdown"]["total"].as_f64().unwrap() + 0.5);
    lines[0] = v2.to_string();
    fs::write(d.path().join("tampered.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = omnirl(d.path(), &["-c", c, "replay", "--log", "tampered.jsonl", "--corpus", corpus]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1:"));
}

#[test]
fn curate_rerun_from_transcript_is_identical_and_offline_without_one_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let c = cfg.to_str().unwrap();
    // the oracle curator needs enough records per category to balance
    ok(omnirl(d.path(), &["-c", c, "gen-world", "-n", "200", "-o", "w"]));
    let corpus = "w/corpus.jsonl";
    let o = omnirl(
        d.path(),
        &["-c", c, "curate", "--manifest", "w/manifest.jsonl", "--corpus", corpus, "--judge", "remote", "--offline", "-o", "x"],
    );
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));

    ok(omnirl(d.path(), &["-c", c, "curate", "--manifest", "w/manifest.jsonl", "--corpus", corpus, "-o", "a"]));
    ok(omnirl(d.path(), &["-c", c, "curate", "--manifest", "w/manifest.jsonl", "--corpus", corpus, "-o", "b"]));
    for f in ["stage1.jsonl", "stage2.jsonl", "audit.jsonl", "histogram.json"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn grad_check_and_eval_write_reports() {
    let d = tempfile::tempdir().unwrap();
    let rep = ok(omnirl(d.path(), &["grad-check", "--cases", "5", "-o", "gc"]));
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["cases"], 20);

    let cfg = small_config(d.path());
    let c = cfg.to_str().unwrap();
    let corpus = gen(d.path(), &cfg, "w");
    let corpus = corpus.to_str().unwrap();
    ok(omnirl(d.path(), &["-c", c, "train", "--stage", "qi", "--corpus", corpus, "-o", "r", "--max-steps", "2"]));
    let e = ok(omnirl(
        d.path(),
        &["-c", c, "eval", "--checkpoint", "r/qi/final.json", "--corpus", corpus, "-o", "ev", "--setting", "AV", "--setting", "V_ONLY"],
    ));
    assert!(e["summaries"]["AV"]["n"].as_u64().unwrap() > 0);
    assert!(d.path().join("ev/eval_av.csv").exists());
    assert!(d.path().join("ev/summary.json").exists());
}

#[test]
fn overflowing_rewards_exit_4() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("hot.toml"), "[trainer]\ntotal_steps = 4\nbatch_prompts = 4\n[rewards]\nformat = 1e308\nanswer = 1e308\nintent = 1e308\n[world]\nn_tasks = 24\n")
        .unwrap();
    let corpus = gen(d.path(), &d.path().join("hot.toml"), "w");
    let o = omnirl(d.path(), &["-c", "hot.toml", "train", "--stage", "qi", "--corpus", corpus.to_str().unwrap(), "-o", "r"]);
    assert_eq!(code(&o), 4, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("r/qi/checkpoint-failed.json").exists());
}
