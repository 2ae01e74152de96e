//! Log-linear factored categorical policies that emit structured traces.
//!
//! A response is a fixed schema of decisions: `K` segment choices, `K`
//! caption choices, one answer choice and, for the noisy-surface variant,
//! eight keep/drop decisions over template markers. Each decision is a
//! softmax over candidate logits `theta . phi(prompt, prefix, candidate)`,
//! so log-probabilities, score gradients and per-position KL are exact.

use crate::interval::SegmentSet;
use crate::trace::{serialize_trace, GroundedPair, StructuredTrace};
use crate::world::{relation_target, solve, Event, GeneratedTask, ModalitySetting, Track, OPTION_LETTERS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_FEATURES: usize = 16;

const SEG_NONE: usize = 0;
const SEG_ANCHOR: usize = 1;
const SEG_RELATION_TARGET: usize = 2;
const SEG_DUPLICATE: usize = 3;
const SEG_OVERLAP: usize = 4;
const SEG_TARGET_TRACK: usize = 5;
const SEG_IN_OPTIONS: usize = 6;
const CAP_SEGMENT_SYMBOL: usize = 7;
const CAP_OVERLAPS: usize = 8;
const CAP_IN_OPTIONS: usize = 9;
const ANS_IN_CHOSEN: usize = 10;
const ANS_GROUNDED: usize = 11;
const ANS_CAPTIONED: usize = 12;
const ANS_ABSENT: usize = 13;
const ANS_TARGET_VISIBLE: usize = 14;
const SURFACE_DROP: usize = 15;

/// Template markers the noisy-surface variant may drop.
pub const SURFACE_MARKERS: [&str; 8] = [
    "<time>", "</time>", "<caption>", "</caption>", "<thinking>", "</thinking>", "<answer>", "</answer>",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("prompt {0} has no visible events")]
    EmptyPrompt(String),
    #[error("action sequence has {got} entries, schema has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("action {action} at position {position} is outside its {candidates} candidates")]
    ActionOutOfRange { position: usize, action: usize, candidates: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    SchemaMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Segment(usize),
    Caption(usize),
    Answer,
    Surface(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Number of segment slots `K`.
    pub segments: usize,
    /// Emit raw template markers that may be dropped (can produce malformed output).
    pub surface_noise: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { segments: 3, surface_noise: false }
    }
}

impl PolicyConfig {
    pub fn positions(&self) -> Vec<Position> {
        let mut out: Vec<Position> = (0..self.segments).map(Position::Segment).collect();
        out.extend((0..self.segments).map(Position::Caption));
        out.push(Position::Answer);
        if self.surface_noise {
            out.extend((0..SURFACE_MARKERS.len()).map(Position::Surface));
        }
        out
    }

    pub fn len(&self) -> usize {
        2 * self.segments + 1 + if self.surface_noise { SURFACE_MARKERS.len() } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// What the policy observes of one task under one modality setting.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub task_id: String,
    pub setting: ModalitySetting,
    task: GeneratedTask,
    events: Vec<(Track, Event)>,
    vocab: Vec<String>,
    anchor: Option<usize>,
    relation_target: Option<usize>,
}

impl PromptContext {
    pub fn new(task: &GeneratedTask, setting: ModalitySetting) -> Result<Self, PolicyError> {
        let mut view = task.clone();
        view.content = task.content.masked(setting);
        let mut events: Vec<(Track, Event)> = view.content.all_events().map(|(t, e)| (t, e.clone())).collect();
        if events.is_empty() {
            return Err(PolicyError::EmptyPrompt(task.id.clone()));
        }
        events.sort_by(|a, b| {
            a.1.span
                .start()
                .total_cmp(&b.1.span.start())
                .then(a.1.span.end().total_cmp(&b.1.span.end()))
                .then((a.0 as u8).cmp(&(b.0 as u8)))
        });
        let mut vocab: Vec<String> = events.iter().map(|(_, e)| e.symbol.clone()).collect();
        vocab.sort();
        vocab.dedup();
        let anchor_track = task.template.anchor_track();
        let anchor = events
            .iter()
            .position(|(t, e)| *t == anchor_track && e.symbol == task.anchor_symbol);
        let relation_target = relation_target(&view, &view.content).and_then(|target| {
            let track = task.template.target_track();
            events.iter().position(|(t, e)| *t == track && e == target)
        });
        Ok(Self {
            task_id: task.id.clone(),
            setting,
            task: view,
            events,
            vocab,
            anchor,
            relation_target,
        })
    }

    pub fn events(&self) -> &[(Track, Event)] {
        &self.events
    }

    pub fn caption_vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn options(&self) -> &[String] {
        &self.task.options
    }
}

/// A sampled response: one action per schema position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampled {
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
}

/// Decoded choices of an action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Event index per segment slot.
    pub segments: Vec<Option<usize>>,
    /// Caption vocabulary index per segment slot.
    pub captions: Vec<Option<usize>>,
    pub answer: usize,
    pub dropped: Vec<bool>,
}

/// Exact per-position quantities a policy-gradient optimizer needs.
pub trait SequencePolicy: Send + Sync {
    fn params(&self) -> &[f64];

    fn with_params(&self, params: Vec<f64>) -> Self
    where
        Self: Sized;

    /// Log-probability of each action under the policy.
    fn token_logprobs(&self, ctx: &PromptContext, actions: &[usize]) -> Result<Vec<f64>, PolicyError>;

    /// Per-position gradient of the action log-probability.
    fn token_grads(&self, ctx: &PromptContext, actions: &[usize]) -> Result<Vec<Vec<f64>>, PolicyError>;

    /// Per-position `KL(self || reference)` at the prefixes of `actions`,
    /// with its gradient in this policy's parameters.
    fn token_kl(
        &self,
        reference: &[f64],
        ctx: &PromptContext,
        actions: &[usize],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredCategoricalPolicy {
    pub config: PolicyConfig,
    params: Vec<f64>,
}

struct Dist {
    feats: Vec<[f64; NUM_FEATURES]>,
    logp: Vec<f64>,
}

impl Dist {
    fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.logp.iter().map(|l| l.exp())
    }

    /// `phi_a - E_p[phi]`.
    fn score(&self, action: usize) -> Vec<f64> {
        let mut g = self.feats[action].to_vec();
        if self.feats.len() > 1 {
            for (p, f) in self.probs().zip(&self.feats) {
                for (gi, fi) in g.iter_mut().zip(f) {
                    *gi -= p * fi;
                }
            }
        } else {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl FactoredCategoricalPolicy {
    /// Uniform policy (all parameters zero).
    pub fn new(config: PolicyConfig) -> Self {
        Self { config, params: vec![0.0; NUM_FEATURES] }
    }

    pub fn from_params(config: PolicyConfig, params: Vec<f64>) -> Result<Self, PolicyError> {
        if params.len() != NUM_FEATURES {
            return Err(PolicyError::SchemaMismatch { got: params.len(), expected: NUM_FEATURES });
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        NUM_FEATURES
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), PolicyError> {
        if params.len() != NUM_FEATURES {
            return Err(PolicyError::SchemaMismatch { got: params.len(), expected: NUM_FEATURES });
        }
        self.params = params;
        Ok(())
    }

    /// Candidate features at `pos` given the earlier actions.
    fn candidate_features(&self, ctx: &PromptContext, pos: Position, prefix: &[usize]) -> Vec<[f64; NUM_FEATURES]> {
        let k = self.config.segments;
        let seg_event = |slot: usize| -> Option<usize> {
            let a = *prefix.get(slot)?;
            if slot == 0 {
                Some(a)
            } else {
                a.checked_sub(1)
            }
        };
        match pos {
            Position::Segment(slot) => {
                if slot > 0 && seg_event(slot - 1).is_none() {
                    let mut f = [0.0; NUM_FEATURES];
                    f[SEG_NONE] = 1.0;
                    return vec![f];
                }
                let chosen: Vec<usize> = (0..slot).filter_map(seg_event).collect();
                let mut out = Vec::with_capacity(ctx.events.len() + 1);
                if slot > 0 {
                    let mut f = [0.0; NUM_FEATURES];
                    f[SEG_NONE] = 1.0;
                    out.push(f);
                }
                let target_track = ctx.task.template.target_track();
                for (i, (track, ev)) in ctx.events.iter().enumerate() {
                    let mut f = [0.0; NUM_FEATURES];
                    f[SEG_ANCHOR] = f64::from(u8::from(ctx.anchor == Some(i)));
                    f[SEG_RELATION_TARGET] = f64::from(u8::from(ctx.relation_target == Some(i)));
                    f[SEG_DUPLICATE] = f64::from(u8::from(chosen.contains(&i)));
                    f[SEG_OVERLAP] = f64::from(u8::from(
                        chosen.iter().any(|&c| c != i && ctx.events[c].1.span.overlaps(&ev.span)),
                    ));
                    f[SEG_TARGET_TRACK] = f64::from(u8::from(*track == target_track));
                    f[SEG_IN_OPTIONS] = f64::from(u8::from(ctx.task.options.contains(&ev.symbol)));
                    out.push(f);
                }
                out
            }
            Position::Caption(slot) => {
                let Some(e) = seg_event(slot) else {
                    return vec![[0.0; NUM_FEATURES]];
                };
                let span = ctx.events[e].1.span;
                ctx.vocab
                    .iter()
                    .map(|sym| {
                        let mut f = [0.0; NUM_FEATURES];
                        f[CAP_SEGMENT_SYMBOL] = f64::from(u8::from(*sym == ctx.events[e].1.symbol));
                        f[CAP_OVERLAPS] = f64::from(u8::from(
                            ctx.events.iter().any(|(_, ev)| ev.symbol == *sym && ev.span.overlaps(&span)),
                        ));
                        f[CAP_IN_OPTIONS] = f64::from(u8::from(ctx.task.options.contains(sym)));
                        f
                    })
                    .collect()
            }
            Position::Answer => {
                let chosen: SegmentSet = (0..k)
                    .filter_map(seg_event)
                    .map(|e| ctx.events[e].1.span)
                    .collect();
                let captioned: Vec<&str> = (0..k)
                    .filter(|&s| seg_event(s).is_some())
                    .filter_map(|s| prefix.get(k + s).map(|&c| ctx.vocab[c].as_str()))
                    .collect();
                let grounded = solve(&ctx.task, &ctx.task.content.restricted_to(&chosen));
                let target_track = ctx.task.template.target_track();
                ctx.task
                    .options
                    .iter()
                    .enumerate()
                    .map(|(i, opt)| {
                        let mut f = [0.0; NUM_FEATURES];
                        let visible: Vec<&(Track, Event)> =
                            ctx.events.iter().filter(|(_, e)| e.symbol == *opt).collect();
                        f[ANS_IN_CHOSEN] = f64::from(u8::from(
                            visible.iter().any(|(_, e)| chosen.covers_span(&e.span)),
                        ));
                        f[ANS_GROUNDED] = f64::from(u8::from(grounded == Some(i)));
                        f[ANS_CAPTIONED] = f64::from(u8::from(captioned.contains(&opt.as_str())));
                        f[ANS_ABSENT] = f64::from(u8::from(visible.is_empty()));
                        f[ANS_TARGET_VISIBLE] = f64::from(u8::from(visible.iter().any(|(t, _)| *t == target_track)));
                        f
                    })
                    .collect()
            }
            Position::Surface(_) => {
                let mut drop = [0.0; NUM_FEATURES];
                drop[SURFACE_DROP] = 1.0;
                vec![[0.0; NUM_FEATURES], drop]
            }
        }
    }

    fn dist_with(&self, params: &[f64], ctx: &PromptContext, pos: Position, prefix: &[usize]) -> Dist {
        let feats = self.candidate_features(ctx, pos, prefix);
        let logits: Vec<f64> = feats
            .iter()
            .map(|f| f.iter().zip(params).map(|(a, b)| a * b).sum())
            .collect();
        Dist { logp: log_softmax(&logits), feats }
    }

    fn check(&self, actions: &[usize]) -> Result<(), PolicyError> {
        if actions.len() != self.config.len() {
            return Err(PolicyError::LengthMismatch { got: actions.len(), expected: self.config.len() });
        }
        Ok(())
    }

    /// Walks the schema along `actions`, yielding each position's distribution.
    fn walk<F>(&self, params: &[f64], ctx: &PromptContext, actions: &[usize], mut f: F) -> Result<(), PolicyError>
    where
        F: FnMut(usize, &Dist, usize),
    {
        self.check(actions)?;
        for (i, pos) in self.config.positions().into_iter().enumerate() {
            let d = self.dist_with(params, ctx, pos, &actions[..i]);
            let a = actions[i];
            if a >= d.logp.len() {
                return Err(PolicyError::ActionOutOfRange { position: i, action: a, candidates: d.logp.len() });
            }
            f(i, &d, a);
        }
        Ok(())
    }

    /// Number of candidates at every position along `actions`.
    pub fn candidate_counts(&self, ctx: &PromptContext, prefix: &[usize]) -> usize {
        let pos = self.config.positions()[prefix.len()];
        self.candidate_features(ctx, pos, prefix).len()
    }

    /// Ancestral sampling. Temperature 0 takes the argmax (lowest index on ties).
    pub fn sample<R: Rng + ?Sized>(&self, ctx: &PromptContext, rng: &mut R, temperature: f64) -> Sampled {
        let mut actions = Vec::with_capacity(self.config.len());
        let mut logprobs = Vec::with_capacity(self.config.len());
        for pos in self.config.positions() {
            let d = self.dist_with(&self.params, ctx, pos, &actions);
            let a = if temperature <= 0.0 {
                let mut best = 0;
                for (i, l) in d.logp.iter().enumerate() {
                    if *l > d.logp[best] {
                        best = i;
                    }
                }
                best
            } else {
                let scaled = log_softmax(&d.logp.iter().map(|l| l / temperature).collect::<Vec<_>>());
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = scaled.len() - 1;
                for (i, l) in scaled.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            logprobs.push(d.logp[a]);
            actions.push(a);
        }
        Sampled { actions, logprobs }
    }

    pub fn decode(&self, ctx: &PromptContext, actions: &[usize]) -> Result<Decoded, PolicyError> {
        self.token_logprobs(ctx, actions)?;
        let k = self.config.segments;
        let segments: Vec<Option<usize>> = (0..k)
            .map(|s| if s == 0 { Some(actions[0]) } else { actions[s].checked_sub(1) })
            .collect();
        let captions = (0..k).map(|s| segments[s].map(|_| actions[k + s])).collect();
        Ok(Decoded {
            segments,
            captions,
            answer: actions[2 * k],
            dropped: actions[2 * k + 1..].iter().map(|&a| a == 1).collect(),
        })
    }

    /// Spans the response grounds its answer in.
    pub fn chosen_spans(&self, ctx: &PromptContext, actions: &[usize]) -> Result<SegmentSet, PolicyError> {
        let d = self.decode(ctx, actions)?;
        Ok(d.segments.iter().flatten().map(|&e| ctx.events[e].1.span).collect())
    }

    /// Surface text of a response in the structured template.
    pub fn render_to_trace(&self, ctx: &PromptContext, actions: &[usize]) -> Result<String, PolicyError> {
        let d = self.decode(ctx, actions)?;
        let pairs: Vec<GroundedPair> = d
            .segments
            .iter()
            .zip(&d.captions)
            .filter_map(|(s, c)| {
                Some(GroundedPair { span: ctx.events[(*s)?].1.span, caption: ctx.vocab[(*c)?].clone() })
            })
            .collect();
        let option = &ctx.task.options[d.answer];
        let thinking = format!(
            "Checked {} segment(s); the evidence points to {option}.",
            pairs.len()
        );
        let trace = StructuredTrace::new(pairs, thinking, OPTION_LETTERS[d.answer]).expect("well-formed by construction");
        let mut text = serialize_trace(&trace);
        for (marker, dropped) in SURFACE_MARKERS.iter().zip(&d.dropped) {
            if *dropped {
                if let Some(at) = text.find(marker) {
                    text.replace_range(at..at + marker.len(), "");
                }
            }
        }
        Ok(text)
    }

    /// Mean per-position `KL(self || other)` along `actions`.
    pub fn exact_kl(&self, ctx: &PromptContext, other: &FactoredCategoricalPolicy, actions: &[usize]) -> Result<f64, PolicyError> {
        if other.config != self.config {
            return Err(PolicyError::SchemaMismatch { got: other.config.len(), expected: self.config.len() });
        }
        let (kl, _) = self.token_kl(&other.params, ctx, actions)?;
        Ok(kl.iter().sum::<f64>() / kl.len() as f64)
    }
}

/// Actions of a perfectly grounded response: the outermost evidence events
/// as segments, each captioned with its own symbol, and the correct answer.
///
/// `None` when the context hides an evidence event or `K` is too small.
pub fn scripted_actions(config: &PolicyConfig, ctx: &PromptContext, task: &GeneratedTask) -> Option<Vec<usize>> {
    let outer: Vec<&crate::world::Evidence> = task
        .evidence
        .iter()
        .filter(|e| !task.evidence.iter().any(|o| o.span != e.span && o.span.contains(&e.span)))
        .collect();
    if outer.len() > config.segments {
        return None;
    }
    let mut seg = Vec::new();
    let mut cap = Vec::new();
    for ev in &outer {
        let idx = ctx
            .events
            .iter()
            .position(|(t, e)| *t == ev.track && e.span == ev.span && e.symbol == ev.symbol)?;
        seg.push(idx);
        cap.push(ctx.vocab.iter().position(|v| *v == ev.symbol)?);
    }
    let mut actions = Vec::with_capacity(config.len());
    for slot in 0..config.segments {
        actions.push(match (slot, seg.get(slot)) {
            (0, Some(&e)) => e,
            (_, Some(&e)) => e + 1,
            _ => 0,
        });
    }
    for slot in 0..config.segments {
        actions.push(cap.get(slot).copied().unwrap_or(0));
    }
    actions.push(task.answer_index());
    if config.surface_noise {
        actions.extend([0; SURFACE_MARKERS.len()]);
    }
    Some(actions)
}

impl SequencePolicy for FactoredCategoricalPolicy {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn with_params(&self, params: Vec<f64>) -> Self {
        Self::from_params(self.config, params).expect("parameter count matches")
    }

    fn token_logprobs(&self, ctx: &PromptContext, actions: &[usize]) -> Result<Vec<f64>, PolicyError> {
        let mut out = Vec::with_capacity(actions.len());
        self.walk(&self.params, ctx, actions, |_, d, a| out.push(d.logp[a]))?;
        Ok(out)
    }

    fn token_grads(&self, ctx: &PromptContext, actions: &[usize]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let mut out = Vec::with_capacity(actions.len());
        self.walk(&self.params, ctx, actions, |_, d, a| out.push(d.score(a)))?;
        Ok(out)
    }

    fn token_kl(
        &self,
        reference: &[f64],
        ctx: &PromptContext,
        actions: &[usize],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolicyError> {
        if reference.len() != NUM_FEATURES {
            return Err(PolicyError::SchemaMismatch { got: reference.len(), expected: NUM_FEATURES });
        }
        let mut kls = Vec::with_capacity(actions.len());
        let mut grads = Vec::with_capacity(actions.len());
        let positions = self.config.positions();
        self.walk(&self.params, ctx, actions, |i, d, _| {
            let q = self.dist_with(reference, ctx, positions[i], &actions[..i]);
            let kl: f64 = d.probs().zip(d.logp.iter().zip(&q.logp)).map(|(p, (lp, lq))| p * (lp - lq)).sum();
            // d KL / d theta = sum_c p_c (log p_c - log q_c - KL) phi_c
            let mut g = vec![0.0; NUM_FEATURES];
            for ((p, f), (lp, lq)) in d.probs().zip(&d.feats).zip(d.logp.iter().zip(&q.logp)) {
                let w = p * (lp - lq - kl);
                for (gi, fi) in g.iter_mut().zip(f) {
                    *gi += w * fi;
                }
            }
            kls.push(kl.max(0.0));
            grads.push(g);
        })?;
        Ok((kls, grads))
    }
}
