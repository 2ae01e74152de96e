//! Central finite-difference check of the analytic objective gradient on
//! randomized toy policies.

use crate::gspo::{
    clipped_objective, evaluate_group, GspoError, RatioMode, Response, RolloutGroup, TrainerConfig,
};
use crate::policy::{FactoredCategoricalPolicy, PolicyConfig, PromptContext, SequencePolicy};
use crate::util::rng_stream;
use crate::world::{generate_corpus, GenParams, GeneratedTask, ModalitySetting};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Ratios closer than this to a clip edge trigger a redraw.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { cases: 100, seed: 0, step: 1e-5, tolerance: 1e-4, floor: 1e-6, kink_margin: 1e-4 }
    }
}

/// One objective configuration under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub trainer: TrainerConfig,
}

/// Both ratio modes, each with the configured clip band and a wide one so
/// that perturbed policies also land inside the band.
pub fn default_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for mode in [RatioMode::Sequence, RatioMode::Token] {
        let base = TrainerConfig { ratio_mode: mode, ..TrainerConfig::toy() };
        let tag = match mode {
            RatioMode::Sequence => "sequence",
            RatioMode::Token => "token",
        };
        out.push(Variant { label: format!("{tag}/narrow"), trainer: base.clone() });
        out.push(Variant {
            label: format!("{tag}/wide"),
            trainer: TrainerConfig { eps_low: 0.2, eps_high: 0.28, ..base },
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub variant: String,
    pub case: usize,
    pub rel_error: f64,
    pub clip_fraction: f64,
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub results: Vec<CaseResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}

pub fn numeric_gradient<P: SequencePolicy>(
    group: &RolloutGroup,
    policy: &P,
    reference: &[f64],
    cfg: &TrainerConfig,
    step: f64,
) -> Result<Vec<f64>, GspoError> {
    let base = policy.params().to_vec();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        let up = clipped_objective(group, &policy.with_params(p.clone()), reference, cfg)?;
        p[i] = base[i] - step;
        let down = clipped_objective(group, &policy.with_params(p), reference, cfg)?;
        out[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// A random group plus current and reference parameters.
pub struct Instance {
    pub group: RolloutGroup,
    pub policy: FactoredCategoricalPolicy,
    pub reference: Vec<f64>,
}

fn near_kink(group: &RolloutGroup, policy: &FactoredCategoricalPolicy, cfg: &TrainerConfig, margin: f64) -> Result<bool, GspoError> {
    let edges = [1.0 - cfg.eps_low, 1.0 + cfg.eps_high];
    for r in &group.responses {
        let new = policy.token_logprobs(&group.ctx, &r.actions)?;
        let ratios = match cfg.ratio_mode {
            RatioMode::Sequence => vec![crate::gspo::sequence_importance_ratio(&new, &r.old_logprobs)?],
            RatioMode::Token => crate::gspo::token_importance_ratios(&new, &r.old_logprobs)?,
        };
        if ratios.iter().any(|x| edges.iter().any(|e| (x - e).abs() < margin)) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Draws an instance; old and new parameters differ by a random scale so
/// that ratios fall inside, at, and beyond the clip band.
pub fn draw_instance<R: Rng>(rng: &mut R, tasks: &[GeneratedTask], cfg: &TrainerConfig) -> Result<Instance, GspoError> {
    let pc = PolicyConfig::default();
    let dim = FactoredCategoricalPolicy::new(pc).num_params();
    let vec_of = |scale: f64, rng: &mut R| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect() };
    let old = vec_of(1.0, rng);
    let scale = [0.0, 1e-5, 1e-3, 0.05, 0.5][rng.gen_range(0..5)];
    let delta = vec_of(scale, rng);
    let reference = vec_of(1.0, rng);
    let task = &tasks[rng.gen_range(0..tasks.len())];
    let ctx = PromptContext::new(task, ModalitySetting::Av)?;
    let old_policy = FactoredCategoricalPolicy::from_params(pc, old.clone())?;
    let responses: Vec<Response> = (0..cfg.group_size)
        .map(|_| {
            let s = old_policy.sample(&ctx, rng, 1.0);
            Response { actions: s.actions, old_logprobs: s.logprobs, reward: rng.gen_range(-1.0..1.0) }
        })
        .collect();
    let group = RolloutGroup::new(ctx, responses, cfg.std_guard)?;
    let new: Vec<f64> = old.iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok(Instance { group, policy: FactoredCategoricalPolicy::from_params(pc, new)?, reference })
}

/// Runs every variant over `cfg.cases` instances, comparing `analytic`
/// against central differences.
pub fn run_with<F>(cfg: &GradCheckConfig, variants: &[Variant], analytic: F) -> Result<GradCheckReport, GspoError>
where
    F: Fn(&Instance, &TrainerConfig) -> Result<Vec<f64>, GspoError>,
{
    let tasks = generate_corpus(cfg.seed, &GenParams { n_tasks: 32, ..GenParams::default() })
        .map_err(|e| GspoError::InvalidConfig(e.to_string()))?;
    let mut results = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for case in 0..cfg.cases {
            let mut rng = rng_stream(cfg.seed, &[0x6C, vi as u64, case as u64]);
            let mut redraws = 0;
            let inst = loop {
                let inst = draw_instance(&mut rng, &tasks, &v.trainer)?;
                if !near_kink(&inst.group, &inst.policy, &v.trainer, cfg.kink_margin)? {
                    break inst;
                }
                redraws += 1;
            };
            let a = analytic(&inst, &v.trainer)?;
            let n = numeric_gradient(&inst.group, &inst.policy, &inst.reference, &v.trainer, cfg.step)?;
            let eval = evaluate_group(&inst.group, &inst.policy, &inst.reference, &v.trainer, false)?;
            results.push(CaseResult {
                variant: v.label.clone(),
                case,
                rel_error: relative_error(&a, &n, cfg.floor),
                clip_fraction: eval.clip_fraction,
                redraws,
            });
        }
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { passed: max_rel_error < cfg.tolerance, max_rel_error, tolerance: cfg.tolerance, results })
}

/// The check against the optimizer's own gradient.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport, GspoError> {
    run_with(cfg, &default_variants(), |inst, t| {
        crate::gspo::objective_gradient(&inst.group, &inst.policy, &inst.reference, t)
    })
}
