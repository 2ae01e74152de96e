//! Held-out evaluation: exact-match accuracy, grounding IoU against the
//! evidence spans, reward components, and the modality-contrast fraction.

use crate::interval::segment_iou;
use crate::judge::JudgeError;
use crate::orchestrator::reward_context;
use crate::policy::{FactoredCategoricalPolicy, PolicyError, PromptContext};
use crate::reward::{attention_reward_over, RewardBreakdown, RewardEngine};
use crate::util::rng_stream;
use crate::world::{ablate_modality, ContentStore, GeneratedTask, Modality, ModalitySetting, WorldError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Decoding {
    /// Highest-probability action at every position.
    Greedy,
    /// One temperature-1 sample per task, seeded per task index.
    Sample { seed: u64 },
}

impl Decoding {
    fn draw(&self, policy: &FactoredCategoricalPolicy, ctx: &PromptContext, idx: usize, tag: u64) -> Vec<usize> {
        match *self {
            Decoding::Greedy => policy.sample(ctx, &mut rng_stream(0, &[]), 0.0).actions,
            Decoding::Sample { seed } => policy.sample(ctx, &mut rng_stream(seed, &[0xEA, tag, idx as u64]), 1.0).actions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub template: String,
    pub modality: Modality,
    pub setting: ModalitySetting,
    pub predicted: String,
    pub answer_key: String,
    pub correct: bool,
    pub iou: f64,
    pub r_format: f64,
    pub r_ans: f64,
    pub r_cons: f64,
    pub r_comp: f64,
    pub r_intent: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub accuracy: f64,
    /// Keyed by modality requirement.
    pub accuracy_by_modality: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub mean_reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn modality_key(m: Modality) -> String {
    serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_else(|| format!("{m:?}"))
}

fn eval_one(
    policy: &FactoredCategoricalPolicy,
    store: &ContentStore,
    task: &GeneratedTask,
    engine: &RewardEngine,
    setting: ModalitySetting,
    decoding: Decoding,
    idx: usize,
) -> Result<Option<EvalRow>, EvalError> {
    let content_ref = match ablate_modality(store, &task.id, setting) {
        Ok(r) => r,
        Err(WorldError::UnsupportedSetting { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let ctx = match PromptContext::new(task, setting) {
        Ok(c) => c,
        Err(PolicyError::EmptyPrompt(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let actions = decoding.draw(policy, &ctx, idx, setting as u64);
    let decoded = policy.decode(&ctx, &actions)?;
    let spans = policy.chosen_spans(&ctx, &actions)?;
    let text = policy.render_to_trace(&ctx, &actions)?;
    let b = engine.qi_reward(&text, &reward_context(task, &content_ref))?;
    let predicted = crate::world::OPTION_LETTERS[decoded.answer].to_string();
    Ok(Some(EvalRow {
        task_id: task.id.clone(),
        template: task.template.slug().to_string(),
        modality: task.modality_requirement,
        setting,
        correct: predicted == task.answer_key,
        predicted,
        answer_key: task.answer_key.clone(),
        iou: segment_iou(&spans, &task.t_gt),
        r_format: b.r_format,
        r_ans: b.r_ans,
        r_cons: b.r_cons,
        r_comp: b.r_comp,
        r_intent: b.r_intent,
        total: b.total,
    }))
}

fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = by.entry(modality_key(r.modality)).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    EvalSummary {
        n: rows.len(),
        accuracy: mean(|r| f64::from(u8::from(r.correct))),
        accuracy_by_modality: by.into_iter().map(|(k, (c, t))| (k, c as f64 / t as f64)).collect(),
        mean_iou: mean(|r| r.iou),
        mean_reward: RewardBreakdown {
            r_format: mean(|r| r.r_format),
            r_ans: mean(|r| r.r_ans),
            r_cons: mean(|r| r.r_cons),
            r_comp: mean(|r| r.r_comp),
            r_intent: mean(|r| r.r_intent),
            r_attn: 0.0,
            total: mean(|r| r.total),
        },
    }
}

/// One row per task that has a usable view under `setting`, in input order.
pub fn evaluate(
    policy: &FactoredCategoricalPolicy,
    store: &ContentStore,
    tasks: &[GeneratedTask],
    engine: &RewardEngine,
    setting: ModalitySetting,
    decoding: Decoding,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::Empty);
    }
    let run = |(i, t): (usize, &GeneratedTask)| eval_one(policy, store, t, engine, setting, decoding, i);
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        tasks.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = tasks.iter().enumerate().map(run).collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for r in results {
        rows.extend(r?);
    }
    let summary = summarize(&rows);
    Ok(EvalReport { rows, summary })
}

/// How often audio-visual prompts earn the contrast bonus, using the mean
/// answer score of `samples` draws per setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub prompts: usize,
    pub fraction: f64,
    /// Mean answer score per setting across prompts.
    pub mean_answer: BTreeMap<String, f64>,
}

pub fn attention_fraction(
    policy: &FactoredCategoricalPolicy,
    store: &ContentStore,
    tasks: &[GeneratedTask],
    engine: &RewardEngine,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<AttentionReport, EvalError> {
    let av: Vec<&GeneratedTask> = tasks.iter().filter(|t| t.modality_requirement == Modality::AV).collect();
    if av.is_empty() || samples == 0 {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for (i, task) in av.iter().enumerate() {
        let mut means = Vec::new();
        for setting in ModalitySetting::ALL {
            let content_ref = match ablate_modality(store, &task.id, setting) {
                Ok(r) => r,
                Err(WorldError::UnsupportedSetting { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let ctx = match PromptContext::new(task, setting) {
                Ok(c) => c,
                Err(PolicyError::EmptyPrompt(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let rctx = reward_context(task, &content_ref);
            let mut rng = rng_stream(seed, &[0xA7, i as u64, setting as u64]);
            let mut sum = 0.0;
            for _ in 0..samples {
                let s = policy.sample(&ctx, &mut rng, 1.0);
                sum += engine.answer_reward(&policy.render_to_trace(&ctx, &s.actions)?, &rctx)?;
            }
            let m = sum / samples as f64;
            *totals.entry(setting.tag().to_string()).or_default() += m;
            means.push(m);
        }
        if means.len() > 1 && attention_reward_over(means[0], &means[1..], alpha) > 0.0 {
            hits += 1;
        }
    }
    let n = av.len() as f64;
    Ok(AttentionReport {
        prompts: av.len(),
        fraction: hits as f64 / n,
        mean_answer: totals.into_iter().map(|(k, v)| (k, v / n)).collect(),
    })
}

/// Writes rows as CSV with a header line.
pub fn write_csv<W: std::io::Write>(rows: &[EvalRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::OracleJudger;
    use crate::policy::{scripted_actions, PolicyConfig};
    use crate::world::{generate_corpus, GenParams};
    use std::sync::Arc;

    fn setup(n: usize) -> (Arc<ContentStore>, Vec<GeneratedTask>, RewardEngine) {
        let tasks = generate_corpus(5, &GenParams { n_tasks: n, ..GenParams::default() }).unwrap();
        let store = Arc::new(ContentStore::new(tasks.clone()));
        let engine = RewardEngine::new(Arc::new(OracleJudger::new(store.clone())));
        (store, tasks, engine)
    }

    #[test]
    fn one_row_per_task() {
        let (store, tasks, engine) = setup(30);
        let p = FactoredCategoricalPolicy::new(PolicyConfig::default());
        let r = evaluate(&p, &store, &tasks, &engine, ModalitySetting::Av, Decoding::Sample { seed: 1 }).unwrap();
        assert_eq!(r.rows.len(), 30);
        assert!(r.rows.iter().all(|row| row.r_format == 1.0));
        let mut csv = Vec::new();
        write_csv(&r.rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 31);
    }

    #[test]
    fn perfect_choices_score_perfectly() {
        let (_, tasks, engine) = setup(20);
        let p = FactoredCategoricalPolicy::new(PolicyConfig::default());
        for t in &tasks {
            let ctx = PromptContext::new(t, ModalitySetting::Av).unwrap();
            let a = scripted_actions(&p.config, &ctx, t).unwrap();
            assert_eq!(segment_iou(&p.chosen_spans(&ctx, &a).unwrap(), &t.t_gt), 1.0);
            let text = p.render_to_trace(&ctx, &a).unwrap();
            let b = engine.qi_reward(&text, &reward_context(t, &t.id)).unwrap();
            assert_eq!(b.total, 3.0, "{}", t.id);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (store, tasks, engine) = setup(10);
        let p = FactoredCategoricalPolicy::new(PolicyConfig::default());
        let a = evaluate(&p, &store, &tasks, &engine, ModalitySetting::Av, Decoding::Greedy).unwrap();
        let b = evaluate(&p, &store, &tasks, &engine, ModalitySetting::Av, Decoding::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_policy_contrast_fraction_is_well_defined() {
        let (store, tasks, engine) = setup(40);
        let p = FactoredCategoricalPolicy::new(PolicyConfig::default());
        let r = attention_fraction(&p, &store, &tasks, &engine, 0.3, 8, 2).unwrap();
        assert!(r.prompts > 0);
        assert!((0.0..=1.0).contains(&r.fraction));
        assert_eq!(r.mean_answer.len(), 3);
    }
}
