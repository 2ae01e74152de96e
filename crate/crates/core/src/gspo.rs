//! Sequence-level clipped policy optimization with group-normalized
//! advantages, an asymmetric clip band and an exact KL penalty.
//!
//! A token-level ratio mode is kept for comparison.

use crate::policy::{PolicyError, PromptContext, SequencePolicy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GspoError {
    #[error("log-prob sequences differ in length ({new} vs {old}) or are empty")]
    LengthMismatch { new: usize, old: usize },
    #[error("group of {0} rollouts is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite {what} in group {group} (prompt {prompt_id})")]
    NonFinite { what: &'static str, group: usize, prompt_id: String },
    #[error("parameter {index} became non-finite after an update at lr {lr}")]
    ParamOverflow { index: usize, lr: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    Sequence,
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Rollouts per prompt.
    pub group_size: usize,
    /// Prompts per update.
    pub batch_prompts: usize,
    /// Lower clip offset: ratios below `1 - eps_low` are clipped.
    pub eps_low: f64,
    /// Upper clip offset: ratios above `1 + eps_high` are clipped.
    pub eps_high: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub std_guard: f64,
    pub ratio_mode: RatioMode,
    /// Updates per sampled batch (1 = strictly on-policy).
    pub reuse: usize,
    /// Recorded for provenance; the toy trainer batches by `batch_prompts`.
    pub global_batch: usize,
    pub max_seq_len: usize,
    pub fps_max_frames: usize,
    /// Recorded only; the toy policies have no expert routing.
    pub moe_aux_loss_coeff: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainerConfig {
    /// Values used for the full-scale model.
    pub fn full_scale() -> Self {
        Self {
            group_size: 8,
            batch_prompts: 32,
            eps_low: 3e-4,
            eps_high: 4e-4,
            beta_kl: 0.03,
            lr: 1e-6,
            warmup_fraction: 0.05,
            total_steps: 100,
            std_guard: 1e-6,
            ratio_mode: RatioMode::Sequence,
            reuse: 1,
            global_batch: 256,
            max_seq_len: 32768,
            fps_max_frames: 64,
            moe_aux_loss_coeff: 1e-3,
        }
    }

    /// Desk-scale preset: same clip band and penalty, much larger step size
    /// (the per-token, per-group averaging keeps toy gradients near 0.03).
    pub fn toy() -> Self {
        Self { lr: 1.0, batch_prompts: 16, total_steps: 300, ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<(), GspoError> {
        let bad = |m: &str| Err(GspoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be positive");
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return bad("eps_low and eps_high must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.std_guard > 0.0) {
            return bad("std_guard must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.beta_kl.is_finite() && self.beta_kl >= 0.0) {
            return bad("lr and beta_kl must be non-negative");
        }
        if self.reuse == 0 {
            return bad("reuse must be at least 1");
        }
        Ok(())
    }

    /// Linear warmup then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_fraction * self.total_steps as f64;
        if warmup <= 0.0 {
            return self.lr;
        }
        self.lr * (step as f64 / warmup).min(1.0)
    }
}

/// Frozen parameters: the sampling policy or the KL reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub params: Vec<f64>,
    pub version: u64,
}

impl PolicySnapshot {
    pub fn new(params: &[f64], version: u64) -> Self {
        Self { params: params.to_vec(), version }
    }
}

fn check_lengths(new: &[f64], old: &[f64]) -> Result<(), GspoError> {
    if new.len() != old.len() || new.is_empty() {
        return Err(GspoError::LengthMismatch { new: new.len(), old: old.len() });
    }
    Ok(())
}

/// `exp` of the mean per-token log-ratio.
pub fn sequence_importance_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<f64, GspoError> {
    check_lengths(logp_new, logp_old)?;
    let mean = logp_new.iter().zip(logp_old).map(|(n, o)| n - o).sum::<f64>() / logp_new.len() as f64;
    Ok(mean.exp())
}

pub fn token_importance_ratios(logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>, GspoError> {
    check_lengths(logp_new, logp_old)?;
    Ok(logp_new.iter().zip(logp_old).map(|(n, o)| (n - o).exp()).collect())
}

/// Rewards standardized by the group mean and population standard deviation.
///
/// Groups whose deviation is below `std_guard` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= std_guard) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn clip_ratio(s: f64, eps_low: f64, eps_high: f64) -> f64 {
    s.clamp(1.0 - eps_low, 1.0 + eps_high)
}

/// `min(s A, clip(s) A)`.
pub fn clipped_term(s: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    (s * adv).min(clip_ratio(s, eps_low, eps_high) * adv)
}

/// True when the clipped branch is strictly smaller, which cuts the
/// gradient through the ratio.
pub fn clip_active(s: f64, adv: f64, eps_low: f64, eps_high: f64) -> bool {
    clip_ratio(s, eps_low, eps_high) * adv < s * adv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub actions: Vec<usize>,
    /// Per-token log-probs under the sampling policy.
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub ctx: PromptContext,
    pub responses: Vec<Response>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(ctx: PromptContext, responses: Vec<Response>, std_guard: f64) -> Result<Self, GspoError> {
        let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards, std_guard)?;
        Ok(Self { ctx, responses, advantages })
    }

    pub fn prompt_id(&self) -> &str {
        &self.ctx.task_id
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn skipped(&self) -> bool {
        self.advantages.iter().all(|a| *a == 0.0)
    }
}

/// Objective value and its diagnostics for one group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupEval {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub gradient: Vec<f64>,
    /// Fraction of clipped ratio terms (rollouts or tokens by mode).
    pub clip_fraction: f64,
    pub ratios: Vec<f64>,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Evaluates the penalized clipped objective of one group, with its exact gradient.
pub fn evaluate_group<P: SequencePolicy>(
    group: &RolloutGroup,
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
    with_gradient: bool,
) -> Result<GroupEval, GspoError> {
    let dim = policy.params().len();
    let g = group.responses.len() as f64;
    let mut eval = GroupEval { gradient: vec![0.0; dim], ..GroupEval::default() };
    let mut clipped = 0usize;
    let mut terms = 0usize;
    for (resp, &adv) in group.responses.iter().zip(&group.advantages) {
        let new = policy.token_logprobs(&group.ctx, &resp.actions)?;
        let len = new.len() as f64;
        let grads = if with_gradient { Some(policy.token_grads(&group.ctx, &resp.actions)?) } else { None };
        match cfg.ratio_mode {
            RatioMode::Sequence => {
                let s = sequence_importance_ratio(&new, &resp.old_logprobs)?;
                eval.ratios.push(s);
                eval.surrogate += clipped_term(s, adv, cfg.eps_low, cfg.eps_high) / g;
                terms += 1;
                if clip_active(s, adv, cfg.eps_low, cfg.eps_high) {
                    clipped += 1;
                } else if let Some(grads) = &grads {
                    // d s / d theta = s * mean_t grad log pi_t
                    for gt in grads {
                        axpy(&mut eval.gradient, adv * s / (len * g), gt);
                    }
                }
            }
            RatioMode::Token => {
                let ratios = token_importance_ratios(&new, &resp.old_logprobs)?;
                eval.ratios.push(sequence_importance_ratio(&new, &resp.old_logprobs)?);
                for (t, &r) in ratios.iter().enumerate() {
                    eval.surrogate += clipped_term(r, adv, cfg.eps_low, cfg.eps_high) / (len * g);
                    terms += 1;
                    if clip_active(r, adv, cfg.eps_low, cfg.eps_high) {
                        clipped += 1;
                    } else if let Some(grads) = &grads {
                        axpy(&mut eval.gradient, adv * r / (len * g), &grads[t]);
                    }
                }
            }
        }
        if cfg.beta_kl != 0.0 {
            let (kls, kl_grads) = policy.token_kl(reference, &group.ctx, &resp.actions)?;
            eval.kl += kls.iter().sum::<f64>() / (len * g);
            if with_gradient {
                for gk in &kl_grads {
                    axpy(&mut eval.gradient, -cfg.beta_kl / (len * g), gk);
                }
            }
        }
    }
    eval.objective = eval.surrogate - cfg.beta_kl * eval.kl;
    eval.clip_fraction = if terms > 0 { clipped as f64 / terms as f64 } else { 0.0 };
    Ok(eval)
}

pub fn clipped_objective<P: SequencePolicy>(
    group: &RolloutGroup,
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
) -> Result<f64, GspoError> {
    Ok(evaluate_group(group, policy, reference, cfg, false)?.objective)
}

pub fn objective_gradient<P: SequencePolicy>(
    group: &RolloutGroup,
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
) -> Result<Vec<f64>, GspoError> {
    Ok(evaluate_group(group, policy, reference, cfg, true)?.gradient)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub groups: usize,
    pub skipped_groups: usize,
}

#[cfg(feature = "parallel")]
fn eval_all<P: SequencePolicy>(
    batch: &[RolloutGroup],
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
) -> Vec<Result<GroupEval, GspoError>> {
    use rayon::prelude::*;
    batch.par_iter().map(|g| evaluate_group(g, policy, reference, cfg, true)).collect()
}

#[cfg(not(feature = "parallel"))]
fn eval_all<P: SequencePolicy>(
    batch: &[RolloutGroup],
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
) -> Vec<Result<GroupEval, GspoError>> {
    batch.iter().map(|g| evaluate_group(g, policy, reference, cfg, true)).collect()
}

/// One gradient-ascent update on the batch mean objective.
///
/// Group contributions are reduced in batch order, so the update is
/// deterministic regardless of thread count.
pub fn train_step<P: SequencePolicy>(
    batch: &[RolloutGroup],
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
    step: usize,
) -> Result<(P, StepStats), GspoError> {
    let dim = policy.params().len();
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; dim];
    let mut stats = StepStats {
        step,
        lr: cfg.lr_at(step),
        mean_reward: 0.0,
        mean_abs_advantage: 0.0,
        clip_fraction: 0.0,
        kl: 0.0,
        grad_norm: 0.0,
        objective: 0.0,
        groups: batch.len(),
        skipped_groups: 0,
    };
    for (i, (group, eval)) in batch.iter().zip(eval_all(batch, policy, reference, cfg)).enumerate() {
        let eval = eval?;
        if eval.gradient.iter().any(|x| !x.is_finite()) || !eval.objective.is_finite() {
            log::error!("non-finite gradient from group {i} ({})", group.prompt_id());
            return Err(GspoError::NonFinite { what: "gradient", group: i, prompt_id: group.prompt_id().to_string() });
        }
        axpy(&mut grad, 1.0 / n, &eval.gradient);
        let rewards = group.rewards();
        stats.mean_reward += rewards.iter().sum::<f64>() / rewards.len() as f64 / n;
        stats.mean_abs_advantage += group.advantages.iter().map(|a| a.abs()).sum::<f64>() / rewards.len() as f64 / n;
        stats.clip_fraction += eval.clip_fraction / n;
        stats.kl += eval.kl / n;
        stats.objective += eval.objective / n;
        stats.skipped_groups += usize::from(group.skipped());
    }
    stats.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let params: Vec<f64> = policy.params().iter().zip(&grad).map(|(p, g)| p + stats.lr * g).collect();
    if let Some(i) = params.iter().position(|x| !x.is_finite()) {
        log::error!("parameter {i} overflowed at lr {}", stats.lr);
        return Err(GspoError::ParamOverflow { index: i, lr: stats.lr });
    }
    Ok((policy.with_params(params), stats))
}
