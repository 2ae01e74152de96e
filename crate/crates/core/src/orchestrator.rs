//! Rollout collection and scoring for both training stages, and the
//! per-step training loop built on them.

use crate::gspo::{train_step, GspoError, PolicySnapshot, Response, RolloutGroup, StepStats, TrainerConfig};
use crate::judge::JudgeError;
use crate::policy::{FactoredCategoricalPolicy, PolicyError, PromptContext, Sampled, SequencePolicy};
use crate::reward::{attention_reward_over, RewardBreakdown, RewardContext, RewardEngine};
use crate::util::rng_stream;
use crate::world::{ablate_modality, ContentStore, GeneratedTask, Modality, ModalitySetting, WorldError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Gspo(#[from] GspoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("no usable prompts: {0}")]
    NoPrompts(String),
    #[error("every rollout of step {step} failed to be judged: {source}")]
    JudgeUnavailable { step: usize, source: JudgeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "qi")]
    Qi,
    #[serde(rename = "ma")]
    Ma,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Qi => 1,
            Stage::Ma => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Qi => "qi",
            Stage::Ma => "ma",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qi" => Ok(Stage::Qi),
            "ma" => Ok(Stage::Ma),
            other => Err(format!("unknown stage '{other}' (expected qi or ma)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeBackend {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub alpha: f64,
    pub judge: JudgeBackend,
    /// Refresh the sampling snapshot every this many steps.
    pub snapshot_cadence: usize,
    pub temperature: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { alpha: 0.3, judge: JudgeBackend::Oracle, snapshot_cadence: 1, temperature: 1.0 }
    }
}

/// One logged rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub stage: Stage,
    /// Position in the step's prompt batch; a prompt can fill two slots
    /// when a batch spans an epoch boundary.
    pub slot: usize,
    pub prompt_id: String,
    pub content_ref: String,
    pub setting: ModalitySetting,
    pub rollout_idx: usize,
    pub raw_text: String,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
    pub seq_ratio: f64,
    /// False for the ablated-input rollouts, which only feed the contrast.
    pub trains: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

/// Reward inputs for a task seen through `content_ref`.
pub fn reward_context(task: &GeneratedTask, content_ref: &str) -> RewardContext {
    RewardContext {
        content_ref: content_ref.to_string(),
        duration: task.content.duration,
        question: task.question_with_options(),
        reference: task.reference_answer.clone(),
        options: Some(task.options.clone()),
    }
}

/// Returns `Some` snapshot when one is due at `step`.
pub fn snapshot_old_policy(
    params: &[f64],
    cadence: usize,
    step: usize,
    current: Option<&PolicySnapshot>,
) -> Option<PolicySnapshot> {
    let due = current.is_none() || step.is_multiple_of(cadence.max(1));
    due.then(|| PolicySnapshot::new(params, current.map_or(0, |s| s.version + 1)))
}

pub fn sample_group(
    policy: &FactoredCategoricalPolicy,
    ctx: &PromptContext,
    group_size: usize,
    temperature: f64,
    seed: u64,
    tags: &[u64],
) -> Vec<Sampled> {
    let mut rng = rng_stream(seed, tags);
    (0..group_size).map(|_| policy.sample(ctx, &mut rng, temperature)).collect()
}

/// Scored rollouts of one prompt, before they are turned into a group.
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub records: Vec<RolloutRecord>,
    pub failures: Vec<JudgeError>,
}

fn score_or_zero(
    result: Result<RewardBreakdown, JudgeError>,
    failures: &mut Vec<JudgeError>,
) -> (RewardBreakdown, Option<String>) {
    match result {
        Ok(b) => (b, None),
        Err(e) => {
            log::warn!("judge failure, rollout reward set to 0: {e}");
            let msg = e.to_string();
            failures.push(e);
            (RewardBreakdown::default(), Some(msg))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_group(
    step: usize,
    slot: usize,
    stage: Stage,
    ctx: PromptContext,
    content_ref: &str,
    policy: &FactoredCategoricalPolicy,
    samples: Vec<Sampled>,
    texts: Vec<String>,
    scored: Vec<(RewardBreakdown, Option<String>)>,
    trainer: &TrainerConfig,
) -> Result<(RolloutGroup, Vec<RolloutRecord>), OrchestratorError> {
    let responses: Vec<Response> = samples
        .into_iter()
        .zip(&scored)
        .map(|(s, (b, _))| Response { actions: s.actions, old_logprobs: s.logprobs, reward: b.total })
        .collect();
    let group = RolloutGroup::new(ctx, responses, trainer.std_guard)?;
    let mut records = Vec::with_capacity(texts.len());
    for (i, (text, (b, err))) in texts.into_iter().zip(scored).enumerate() {
        let resp = &group.responses[i];
        let now = policy.token_logprobs(&group.ctx, &resp.actions)?;
        records.push(RolloutRecord {
            step,
            slot,
            stage,
            prompt_id: group.ctx.task_id.clone(),
            content_ref: content_ref.to_string(),
            setting: group.ctx.setting,
            rollout_idx: i,
            raw_text: text,
            breakdown: b,
            advantage: group.advantages[i],
            seq_ratio: crate::gspo::sequence_importance_ratio(&now, &resp.old_logprobs)?,
            trains: true,
            judge_error: err,
        });
    }
    Ok((group, records))
}

/// Scores pre-sampled full-modality rollouts with the grounding-stage reward.
#[allow(clippy::too_many_arguments)]
pub fn score_qi_group(
    task: &GeneratedTask,
    ctx: PromptContext,
    samples: Vec<Sampled>,
    sampler: &FactoredCategoricalPolicy,
    current: &FactoredCategoricalPolicy,
    engine: &RewardEngine,
    trainer: &TrainerConfig,
    step: usize,
    slot: usize,
) -> Result<ScoredGroup, OrchestratorError> {
    let rctx = reward_context(task, &task.id);
    let mut failures = Vec::new();
    let mut texts = Vec::with_capacity(samples.len());
    let mut scored = Vec::with_capacity(samples.len());
    for s in &samples {
        let text = sampler.render_to_trace(&ctx, &s.actions)?;
        scored.push(score_or_zero(engine.qi_reward(&text, &rctx), &mut failures));
        texts.push(text);
    }
    let (group, records) = finish_group(step, slot, Stage::Qi, ctx, &task.id, current, samples, texts, scored, trainer)?;
    Ok(ScoredGroup { group, records, failures })
}

/// Samples and scores one grounding-stage group.
#[allow(clippy::too_many_arguments)]
pub fn run_qi_group(
    task: &GeneratedTask,
    snapshot: &FactoredCategoricalPolicy,
    current: &FactoredCategoricalPolicy,
    engine: &RewardEngine,
    stage: &StageConfig,
    trainer: &TrainerConfig,
    seed: u64,
    step: usize,
    slot: usize,
) -> Result<ScoredGroup, OrchestratorError> {
    let ctx = PromptContext::new(task, ModalitySetting::Av)?;
    let tags = [Stage::Qi.tag(), step as u64, slot as u64, 0];
    let samples = sample_group(snapshot, &ctx, trainer.group_size, stage.temperature, seed, &tags);
    score_qi_group(task, ctx, samples, snapshot, current, engine, trainer, step, slot)
}

/// Per-setting mean answer scores and the resulting contrast bonus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutcome {
    /// `(setting, mean answer score)` for every setting that was run.
    pub means: Vec<(ModalitySetting, f64)>,
    pub r_attn: f64,
}

/// Samples all three input settings of a prompt; scores the full-modality
/// rollouts with the contrast-stage reward.
#[allow(clippy::too_many_arguments)]
pub fn run_ma_group(
    task: &GeneratedTask,
    store: &ContentStore,
    snapshot: &FactoredCategoricalPolicy,
    current: &FactoredCategoricalPolicy,
    engine: &RewardEngine,
    stage: &StageConfig,
    trainer: &TrainerConfig,
    seed: u64,
    step: usize,
    slot: usize,
) -> Result<(ScoredGroup, AttentionOutcome), OrchestratorError> {
    let mut failures = Vec::new();
    let mut av = None;
    let mut means = Vec::new();
    let mut records = Vec::new();
    for (si, setting) in ModalitySetting::ALL.into_iter().enumerate() {
        let content_ref = match ablate_modality(store, &task.id, setting) {
            Ok(r) => r,
            Err(WorldError::UnsupportedSetting { .. }) => {
                log::debug!("{}: {setting} unavailable, skipped", task.id);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let ctx = match PromptContext::new(task, setting) {
            Ok(c) => c,
            Err(PolicyError::EmptyPrompt(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let tags = [Stage::Ma.tag(), step as u64, slot as u64, si as u64];
        let samples = sample_group(snapshot, &ctx, trainer.group_size, stage.temperature, seed, &tags);
        let rctx = reward_context(task, &content_ref);
        let mut texts = Vec::new();
        let mut answers = Vec::new();
        for s in &samples {
            let text = snapshot.render_to_trace(&ctx, &s.actions)?;
            let r = match engine.answer_reward(&text, &rctx) {
                Ok(v) => (v, None),
                Err(e) => {
                    let msg = e.to_string();
                    failures.push(e);
                    (0.0, Some(msg))
                }
            };
            answers.push(r);
            texts.push(text);
        }
        let mean = answers.iter().map(|(v, _)| v).sum::<f64>() / answers.len() as f64;
        means.push((setting, mean));
        if setting == ModalitySetting::Av {
            av = Some((ctx, content_ref, samples, texts, answers));
        } else {
            for (i, (text, (r_ans, err))) in texts.into_iter().zip(answers).enumerate() {
                let r_format = crate::trace::format_reward(&text);
                records.push(RolloutRecord {
                    step,
                    slot,
                    stage: Stage::Ma,
                    prompt_id: task.id.clone(),
                    content_ref: content_ref.clone(),
                    setting,
                    rollout_idx: i,
                    raw_text: text,
                    breakdown: RewardBreakdown::ma(r_format, r_ans, 0.0, &engine.weights),
                    advantage: 0.0,
                    seq_ratio: 1.0,
                    trains: false,
                    judge_error: err,
                });
            }
        }
    }
    let Some((ctx, content_ref, samples, texts, answers)) = av else {
        return Err(OrchestratorError::NoPrompts(format!("{} has no full-modality view", task.id)));
    };
    let full = means[0].1;
    let ablated: Vec<f64> = means[1..].iter().map(|(_, m)| *m).collect();
    let r_attn = attention_reward_over(full, &ablated, stage.alpha);
    let rctx = reward_context(task, &content_ref);
    let scored: Vec<(RewardBreakdown, Option<String>)> = texts
        .iter()
        .zip(&answers)
        .map(|(text, (_, err))| match err {
            Some(e) => (RewardBreakdown::default(), Some(e.clone())),
            None => score_or_zero(engine.ma_reward(text, &rctx, r_attn), &mut failures),
        })
        .collect();
    let (group, mut av_records) =
        finish_group(step, slot, Stage::Ma, ctx, &content_ref, current, samples, texts, scored, trainer)?;
    av_records.append(&mut records);
    Ok((ScoredGroup { group, records: av_records, failures }, AttentionOutcome { means, r_attn }))
}

/// Parameters carried between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: FactoredCategoricalPolicy,
    pub reference: Vec<f64>,
    pub snapshot: Option<PolicySnapshot>,
    /// Next step to run.
    pub step: usize,
}

impl TrainState {
    /// Fresh state whose KL reference is the starting policy.
    pub fn new(policy: FactoredCategoricalPolicy) -> Self {
        let reference = policy.params().to_vec();
        Self { policy, reference, snapshot: None, step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub stats: StepStats,
    pub records: Vec<RolloutRecord>,
    /// Fraction of prompts whose full-modality group earned the contrast bonus.
    pub attention_fraction: Option<f64>,
    pub judge_failures: usize,
}

/// Drives one stage over a fixed prompt set.
pub struct StageRunner {
    pub store: Arc<ContentStore>,
    pub engine: RewardEngine,
    pub stage: Stage,
    pub stage_config: StageConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
    pub prompts: Vec<String>,
}

impl StageRunner {
    pub fn new(
        store: Arc<ContentStore>,
        engine: RewardEngine,
        stage: Stage,
        stage_config: StageConfig,
        trainer: TrainerConfig,
        seed: u64,
        prompts: Vec<String>,
    ) -> Result<Self, OrchestratorError> {
        trainer.validate()?;
        let mut prompts = prompts;
        if stage == Stage::Ma {
            let before = prompts.len();
            prompts.retain(|id| store.task(id).is_ok_and(|t| t.modality_requirement == Modality::AV));
            if prompts.is_empty() {
                return Err(OrchestratorError::NoPrompts(format!(
                    "the contrast stage needs audio-visual tasks; none among {before} prompts"
                )));
            }
        }
        if prompts.is_empty() {
            return Err(OrchestratorError::NoPrompts("empty prompt list".into()));
        }
        for id in &prompts {
            store.task(id)?;
        }
        Ok(Self { store, engine, stage, stage_config, trainer, seed, prompts })
    }

    /// Prompt ids of a step: consecutive slices of per-epoch shuffles.
    pub fn batch_ids(&self, step: usize) -> Vec<&str> {
        let n = self.prompts.len();
        let b = self.trainer.batch_prompts;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|p| {
                let epoch = p / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng_stream(self.seed, &[self.stage.tag(), 0xE, epoch as u64]));
                    cached = Some((epoch, perm));
                }
                self.prompts[cached.as_ref().expect("set above").1[p % n]].as_str()
            })
            .collect()
    }

    fn run_prompt(
        &self,
        slot: usize,
        id: &str,
        sampler: &FactoredCategoricalPolicy,
        current: &FactoredCategoricalPolicy,
        step: usize,
    ) -> Result<(ScoredGroup, Option<f64>), OrchestratorError> {
        let task = self.store.task(id)?;
        match self.stage {
            Stage::Qi => Ok((
                run_qi_group(task, sampler, current, &self.engine, &self.stage_config, &self.trainer, self.seed, step, slot)?,
                None,
            )),
            Stage::Ma => {
                let (g, outcome) = run_ma_group(
                    task,
                    &self.store,
                    sampler,
                    current,
                    &self.engine,
                    &self.stage_config,
                    &self.trainer,
                    self.seed,
                    step,
                    slot,
                )?;
                Ok((g, Some(outcome.r_attn)))
            }
        }
    }

    /// Samples, scores and applies one update; advances `state.step`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepOutput, OrchestratorError> {
        let step = state.step;
        if let Some(s) =
            snapshot_old_policy(state.policy.params(), self.stage_config.snapshot_cadence, step, state.snapshot.as_ref())
        {
            state.snapshot = Some(s);
        }
        let snap = state.snapshot.as_ref().expect("snapshot taken");
        let sampler = state.policy.with_params(snap.params.clone());
        let ids = self.batch_ids(step);
        let results = self.map_prompts(&ids, &sampler, &state.policy, step);
        let mut groups = Vec::with_capacity(ids.len());
        let mut records = Vec::new();
        let mut failures = Vec::new();
        let mut attn_hits = 0usize;
        let mut attn_total = 0usize;
        for r in results {
            let (scored, attn) = r?;
            if let Some(a) = attn {
                attn_total += 1;
                attn_hits += usize::from(a > 0.0);
            }
            groups.push(scored.group);
            records.extend(scored.records);
            failures.extend(scored.failures);
        }
        let trained = records.iter().filter(|r| r.trains).count();
        if trained > 0 && failures.len() >= trained {
            let source = failures.swap_remove(0);
            return Err(OrchestratorError::JudgeUnavailable { step, source });
        }
        let mut policy = state.policy.clone();
        let mut stats = None;
        for _ in 0..self.trainer.reuse {
            let (next, s) = train_step(&groups, &policy, &state.reference, &self.trainer, step)?;
            policy = next;
            stats = Some(s);
        }
        state.policy = policy;
        state.step += 1;
        Ok(StepOutput {
            stats: stats.expect("reuse >= 1"),
            records,
            attention_fraction: (attn_total > 0).then(|| attn_hits as f64 / attn_total as f64),
            judge_failures: failures.len(),
        })
    }

    #[cfg(feature = "parallel")]
    fn map_prompts(
        &self,
        ids: &[&str],
        sampler: &FactoredCategoricalPolicy,
        current: &FactoredCategoricalPolicy,
        step: usize,
    ) -> Vec<Result<(ScoredGroup, Option<f64>), OrchestratorError>> {
        use rayon::prelude::*;
        ids.par_iter()
            .enumerate()
            .map(|(slot, id)| self.run_prompt(slot, id, sampler, current, step))
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn map_prompts(
        &self,
        ids: &[&str],
        sampler: &FactoredCategoricalPolicy,
        current: &FactoredCategoricalPolicy,
        step: usize,
    ) -> Vec<Result<(ScoredGroup, Option<f64>), OrchestratorError>> {
        ids.iter()
            .enumerate()
            .map(|(slot, id)| self.run_prompt(slot, id, sampler, current, step))
            .collect()
    }
}
