//! Per-rollout scalar rewards for the grounding stage and the
//! modality-contrast stage.

use crate::interval::{temporal_concat, CropDirective};
use crate::judge::{judge_answer, JudgeError, Judger, RuleSet};
use crate::trace::{parse_trace, StructuredTrace};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Multipliers on each reward component; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub format: f64,
    pub answer: f64,
    pub intent: f64,
    pub attention: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { format: 1.0, answer: 1.0, intent: 1.0, attention: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_ans: f64,
    pub r_cons: f64,
    pub r_comp: f64,
    pub r_intent: f64,
    pub r_attn: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Grounding-stage total from already judged components.
    pub fn qi(r_format: f64, r_ans: f64, r_cons: f64, r_comp: f64, w: &RewardWeights) -> Self {
        if r_format == 0.0 {
            return Self::default();
        }
        let r_intent = 0.5 * (r_cons + r_comp);
        Self {
            r_format,
            r_ans,
            r_cons,
            r_comp,
            r_intent,
            r_attn: 0.0,
            total: w.format * r_format + w.answer * r_ans + w.intent * r_intent,
        }
    }

    /// Contrast-stage total from already judged components.
    pub fn ma(r_format: f64, r_ans: f64, r_attn: f64, w: &RewardWeights) -> Self {
        if r_format == 0.0 {
            return Self::default();
        }
        Self {
            r_format,
            r_ans,
            r_attn,
            total: w.format * r_format + w.answer * r_ans + w.attention * r_attn,
            ..Self::default()
        }
    }

    /// Name of the first field differing by more than `tol`.
    pub fn first_difference(&self, other: &Self, tol: f64) -> Option<&'static str> {
        let pairs = [
            ("r_format", self.r_format, other.r_format),
            ("r_ans", self.r_ans, other.r_ans),
            ("r_cons", self.r_cons, other.r_cons),
            ("r_comp", self.r_comp, other.r_comp),
            ("r_intent", self.r_intent, other.r_intent),
            ("r_attn", self.r_attn, other.r_attn),
            ("total", self.total, other.total),
        ];
        pairs
            .into_iter()
            .find(|(_, a, b)| !((a - b).abs() <= tol || (a.is_nan() && b.is_nan())))
            .map(|(name, _, _)| name)
    }
}

/// What the reward functions need to know about the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardContext {
    pub content_ref: String,
    pub duration: f64,
    pub question: String,
    pub reference: String,
    pub options: Option<Vec<String>>,
}

/// Mean consistency score over all time/caption pairs.
pub fn consistency_reward(
    trace: &StructuredTrace,
    content_ref: &str,
    judger: &dyn Judger,
    rules: &RuleSet,
) -> Result<f64, JudgeError> {
    let mut sum = 0.0;
    for pair in trace.pairs() {
        sum += judger.consistency(content_ref, pair.span, &pair.caption, rules)?.value;
    }
    Ok(sum / trace.pairs().len() as f64)
}

pub fn completeness_reward(
    trace: &StructuredTrace,
    ctx: &RewardContext,
    judger: &dyn Judger,
    rules: &RuleSet,
) -> Result<f64, JudgeError> {
    let directive = CropDirective::new(ctx.content_ref.clone(), trace.spans());
    let composite = match temporal_concat(&directive, ctx.duration) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{}: {e}; completeness set to 0", ctx.content_ref);
            return Ok(0.0);
        }
    };
    Ok(judger.completeness(&composite, &ctx.question, trace.final_answer(), rules)?.value)
}

fn spans_in_bounds(trace: &StructuredTrace, duration: f64) -> bool {
    trace.spans().check_within(duration).is_ok()
}

/// Judges and rule sets shared by every rollout of a run.
#[derive(Clone)]
pub struct RewardEngine {
    pub judger: Arc<dyn Judger>,
    pub consistency_rules: RuleSet,
    pub completeness_rules: RuleSet,
    pub weights: RewardWeights,
}

impl RewardEngine {
    pub fn new(judger: Arc<dyn Judger>) -> Self {
        Self {
            judger,
            consistency_rules: RuleSet::default_consistency(),
            completeness_rules: RuleSet::default_completeness(),
            weights: RewardWeights::default(),
        }
    }

    fn answer(&self, trace: &StructuredTrace, ctx: &RewardContext) -> Result<f64, JudgeError> {
        Ok(judge_answer(
            self.judger.as_ref(),
            &ctx.question,
            trace.final_answer(),
            &ctx.reference,
            ctx.options.as_deref(),
        )?
        .value)
    }

    /// Grounding-stage reward of one raw rollout.
    pub fn qi_reward(&self, text: &str, ctx: &RewardContext) -> Result<RewardBreakdown, JudgeError> {
        let Ok(trace) = parse_trace(text) else {
            return Ok(RewardBreakdown::default());
        };
        let r_ans = self.answer(&trace, ctx)?;
        let (r_cons, r_comp) = if spans_in_bounds(&trace, ctx.duration) {
            (
                consistency_reward(&trace, &ctx.content_ref, self.judger.as_ref(), &self.consistency_rules)?,
                completeness_reward(&trace, ctx, self.judger.as_ref(), &self.completeness_rules)?,
            )
        } else {
            log::warn!("{}: span beyond {} s; process rewards set to 0", ctx.content_ref, ctx.duration);
            (0.0, 0.0)
        };
        Ok(RewardBreakdown::qi(1.0, r_ans, r_cons, r_comp, &self.weights))
    }

    /// Contrast-stage reward of one full-modality rollout.
    pub fn ma_reward(&self, text: &str, ctx: &RewardContext, attn: f64) -> Result<RewardBreakdown, JudgeError> {
        let Ok(trace) = parse_trace(text) else {
            return Ok(RewardBreakdown::default());
        };
        let r_ans = self.answer(&trace, ctx)?;
        Ok(RewardBreakdown::ma(1.0, r_ans, attn, &self.weights))
    }

    /// Answer score alone; used for the ablated settings. Malformed text scores 0.
    pub fn answer_reward(&self, text: &str, ctx: &RewardContext) -> Result<f64, JudgeError> {
        match parse_trace(text) {
            Ok(trace) => self.answer(&trace, ctx),
            Err(_) => Ok(0.0),
        }
    }
}

/// `alpha` when the full-modality score is at least each ablated score.
pub fn attention_reward(r1: f64, r2: f64, r3: f64, alpha: f64) -> f64 {
    attention_reward_over(r1, &[r2, r3], alpha)
}

/// Same rule over however many ablated settings were available.
pub fn attention_reward_over(full: f64, ablated: &[f64], alpha: f64) -> f64 {
    if ablated.iter().all(|&r| full >= r) {
        alpha
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::TimeSpan;
    use crate::judge::{JudgeScore, OracleJudger};
    use crate::interval::CompositeContentRef;
    use crate::trace::{serialize_trace, GroundedPair};

    struct Fixed {
        cons: Vec<f64>,
        comp: f64,
    }

    impl Judger for Fixed {
        fn consistency(&self, _: &str, span: TimeSpan, _: &str, _: &RuleSet) -> Result<JudgeScore, JudgeError> {
            Ok(JudgeScore::new(self.cons[span.start() as usize]))
        }
        fn completeness(&self, _: &CompositeContentRef, _: &str, _: &str, _: &RuleSet) -> Result<JudgeScore, JudgeError> {
            Ok(JudgeScore::new(self.comp))
        }
        fn answer_text(&self, _: &str, _: &str, _: &str) -> Result<JudgeScore, JudgeError> {
            Ok(JudgeScore::new(0.5))
        }
    }

    fn trace(n: usize, answer: &str) -> String {
        let pairs = (0..n)
            .map(|i| GroundedPair { span: TimeSpan::new(i as f64, i as f64 + 0.5).unwrap(), caption: "x".into() })
            .collect();
        serialize_trace(&StructuredTrace::new(pairs, "t", answer).unwrap())
    }

    fn ctx(options: Option<Vec<String>>) -> RewardContext {
        RewardContext {
            content_ref: "c".into(),
            duration: 10.0,
            question: "q".into(),
            reference: "B".into(),
            options,
        }
    }

    fn opts() -> Option<Vec<String>> {
        Some(vec!["w".into(), "x".into(), "y".into(), "z".into()])
    }

    #[test]
    fn consistency_is_pair_mean() {
        let engine = RewardEngine::new(Arc::new(Fixed { cons: vec![1.0, 0.5], comp: 0.0 }));
        let t = parse_trace(&trace(2, "B")).unwrap();
        let r = consistency_reward(&t, "c", engine.judger.as_ref(), &engine.consistency_rules).unwrap();
        assert_eq!(r, 0.75);
    }

    #[test]
    fn qi_composition_and_gating() {
        let engine = RewardEngine::new(Arc::new(Fixed { cons: vec![0.8], comp: 0.6 }));
        let b = engine.qi_reward(&trace(1, "text answer"), &ctx(None)).unwrap();
        assert!((b.total - 2.2).abs() < 1e-12, "{b:?}");
        assert!((b.r_intent - 0.7).abs() < 1e-12);
        assert_eq!(engine.qi_reward("<time>oops", &ctx(None)).unwrap(), RewardBreakdown::default());
        let perfect = RewardEngine::new(Arc::new(Fixed { cons: vec![1.0], comp: 1.0 }));
        assert_eq!(perfect.qi_reward(&trace(1, "b)"), &ctx(opts())).unwrap().total, 3.0);
    }

    #[test]
    fn out_of_bounds_spans_zero_process_rewards() {
        let engine = RewardEngine::new(Arc::new(Fixed { cons: vec![1.0; 20], comp: 1.0 }));
        let mut c = ctx(opts());
        c.duration = 1.2;
        let b = engine.qi_reward(&trace(2, "B"), &c).unwrap();
        assert_eq!((b.r_format, b.r_ans, b.r_cons, b.r_comp, b.total), (1.0, 1.0, 0.0, 0.0, 2.0));
    }

    #[test]
    fn ma_composition() {
        let engine = RewardEngine::new(Arc::new(Fixed { cons: vec![], comp: 0.0 }));
        assert!((engine.ma_reward(&trace(1, "B"), &ctx(opts()), 0.3).unwrap().total - 2.3).abs() < 1e-12);
        assert_eq!(engine.ma_reward(&trace(1, "B"), &ctx(opts()), 0.0).unwrap().total, 2.0);
        assert_eq!(engine.ma_reward("garbage", &ctx(opts()), 0.3).unwrap().total, 0.0);
    }

    #[test]
    fn attention_case_split() {
        assert_eq!(attention_reward(0.8, 0.7, 0.6, 0.3), 0.3);
        assert_eq!(attention_reward(0.5, 0.8, 0.2, 0.3), 0.0);
        assert_eq!(attention_reward(0.7, 0.7, 0.7, 0.3), 0.3);
        assert_eq!(attention_reward_over(0.4, &[0.6], 0.3), 0.0);
        assert_eq!(attention_reward_over(0.9, &[0.7], 0.3), 0.3);
    }

    #[test]
    fn oracle_perfect_trace_saturates_process_rewards() {
        use crate::world::{generate_corpus, ContentStore, GenParams};
        let tasks = generate_corpus(21, &GenParams { n_tasks: 20, ..GenParams::default() }).unwrap();
        let engine = RewardEngine::new(Arc::new(OracleJudger::new(Arc::new(ContentStore::new(tasks.clone())))));
        for t in &tasks {
            let pairs: Vec<GroundedPair> = t
                .evidence
                .iter()
                .map(|e| GroundedPair { span: e.span, caption: e.symbol.clone() })
                .collect();
            let pairs = if t.t_gt.len() == 1 {
                // nested evidence: one span carrying both symbols
                vec![GroundedPair {
                    span: t.t_gt.spans()[0],
                    caption: t.evidence.iter().map(|e| e.symbol.as_str()).collect::<Vec<_>>().join(" and "),
                }]
            } else {
                pairs
            };
            let text = serialize_trace(&StructuredTrace::new(pairs, "reasoning", t.answer_key.clone()).unwrap());
            let c = RewardContext {
                content_ref: t.id.clone(),
                duration: t.content.duration,
                question: t.question.clone(),
                reference: t.reference_answer.clone(),
                options: Some(t.options.clone()),
            };
            let b = engine.qi_reward(&text, &c).unwrap();
            assert_eq!((b.r_cons, b.r_comp, b.total), (1.0, 1.0, 3.0), "{}", t.id);
        }
    }
}
