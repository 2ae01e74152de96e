//! Browser demo: interval playground, clipped-ratio explorer and a small
//! in-page training run. Every export takes and returns JSON strings.

use omnirl::eval::{evaluate, Decoding};
use omnirl::gspo::{clip_active, clip_ratio, clipped_term, TrainerConfig};
use omnirl::interval::{segment_iou, SegmentSet, TimeSpan};
use omnirl::judge::OracleJudger;
use omnirl::orchestrator::{Stage, StageConfig, StageRunner, TrainState};
use omnirl::policy::{FactoredCategoricalPolicy, PolicyConfig};
use omnirl::reward::RewardEngine;
use omnirl::world::{generate_corpus, ContentStore, GenParams, ModalitySetting};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use wasm_bindgen::prelude::*;

fn to_set(spans: &[[f64; 2]]) -> Result<SegmentSet, String> {
    spans
        .iter()
        .map(|[a, b]| TimeSpan::new(*a, *b).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map(SegmentSet::new)
}

fn pairs(s: &SegmentSet) -> Vec<[f64; 2]> {
    s.spans().iter().map(|t| [t.start(), t.end()]).collect()
}

#[derive(Debug, Deserialize)]
pub struct IntervalQuery {
    pub chosen: Vec<[f64; 2]>,
    pub evidence: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct IntervalAnswer {
    pub merged: Vec<[f64; 2]>,
    pub measure: f64,
    pub disjoint: bool,
    pub covers_evidence: bool,
    pub disjoint_cover: bool,
    pub overlap_with_evidence: f64,
    pub iou: f64,
}

pub fn interval_report(q: &IntervalQuery) -> Result<IntervalAnswer, String> {
    let chosen = to_set(&q.chosen)?;
    let evidence = to_set(&q.evidence)?;
    Ok(IntervalAnswer {
        merged: pairs(&chosen.merge_overlaps()),
        measure: chosen.measure(),
        disjoint: chosen.pairwise_disjoint(),
        covers_evidence: chosen.union_covers(&evidence),
        disjoint_cover: chosen.disjoint_cover(&evidence),
        overlap_with_evidence: chosen.intersection_measure(&evidence),
        iou: segment_iou(&chosen, &evidence),
    })
}

#[derive(Debug, Deserialize)]
pub struct ClipQuery {
    pub advantage: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ClipPoint {
    pub ratio: f64,
    pub clipped_ratio: f64,
    pub term: f64,
    /// True where the ratio receives no gradient.
    pub flat: bool,
}

pub fn clip_curve(q: &ClipQuery) -> Result<Vec<ClipPoint>, String> {
    if !(q.lo > 0.0 && q.hi > q.lo) || q.points < 2 || q.points > 10_000 {
        return Err("need 0 < lo < hi and 2..=10000 points".into());
    }
    Ok((0..q.points)
        .map(|i| {
            let s = q.lo + (q.hi - q.lo) * i as f64 / (q.points - 1) as f64;
            ClipPoint {
                ratio: s,
                clipped_ratio: clip_ratio(s, q.eps_low, q.eps_high),
                term: clipped_term(s, q.advantage, q.eps_low, q.eps_high),
                flat: clip_active(s, q.advantage, q.eps_low, q.eps_high),
            }
        })
        .collect())
}

#[derive(Debug, Deserialize)]
pub struct TrainQuery {
    pub seed: u64,
    pub tasks: usize,
    pub steps: usize,
    pub lr: Option<f64>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct TrainAnswer {
    pub rewards: Vec<f64>,
    pub kl: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub iou_before: f64,
    pub iou_after: f64,
}

pub fn toy_run(q: &TrainQuery) -> Result<TrainAnswer, String> {
    if q.tasks == 0 || q.tasks > 512 || q.steps > 1000 {
        return Err("tasks must be 1..=512 and steps at most 1000".into());
    }
    let tasks = generate_corpus(q.seed, &GenParams { n_tasks: q.tasks, ..GenParams::default() }).map_err(|e| e.to_string())?;
    let split = (tasks.len() * 3 / 4).max(1);
    let store = Arc::new(ContentStore::new(tasks.clone()));
    let engine = RewardEngine::new(Arc::new(OracleJudger::new(store.clone())));
    let trainer = TrainerConfig {
        total_steps: q.steps.max(1),
        batch_prompts: 8,
        lr: q.lr.unwrap_or(TrainerConfig::toy().lr),
        ..TrainerConfig::toy()
    };
    let ids = tasks[..split].iter().map(|t| t.id.clone()).collect();
    let runner = StageRunner::new(store.clone(), engine.clone(), Stage::Qi, StageConfig::default(), trainer, q.seed, ids)
        .map_err(|e| e.to_string())?;
    let held = if split < tasks.len() { &tasks[split..] } else { &tasks[..] };
    let measure = |p: &FactoredCategoricalPolicy| {
        evaluate(p, &store, held, &engine, ModalitySetting::Av, Decoding::Sample { seed: q.seed })
            .map(|r| (r.summary.accuracy, r.summary.mean_iou))
            .map_err(|e| e.to_string())
    };
    let mut state = TrainState::new(FactoredCategoricalPolicy::new(PolicyConfig::default()));
    let (accuracy_before, iou_before) = measure(&state.policy)?;
    let mut rewards = Vec::with_capacity(q.steps);
    let mut kl = Vec::with_capacity(q.steps);
    for _ in 0..q.steps {
        let out = runner.step(&mut state).map_err(|e| e.to_string())?;
        rewards.push(out.stats.mean_reward);
        kl.push(out.stats.kl);
    }
    let (accuracy_after, iou_after) = measure(&state.policy)?;
    Ok(TrainAnswer { rewards, kl, accuracy_before, accuracy_after, iou_before, iou_after })
}

fn call<Q: for<'de> Deserialize<'de>, A: Serialize>(json: &str, f: impl Fn(&Q) -> Result<A, String>) -> Result<String, JsError> {
    let q: Q = serde_json::from_str(json).map_err(|e| JsError::new(&e.to_string()))?;
    let a = f(&q).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&a).expect("serializable"))
}

/// `{chosen: [[s,e],…], evidence: [[s,e],…]}` → interval facts.
#[wasm_bindgen]
pub fn intervals(json: &str) -> Result<String, JsError> {
    call(json, interval_report)
}

/// `{advantage, eps_low, eps_high, lo, hi, points}` → sampled clip curve.
#[wasm_bindgen]
pub fn clip(json: &str) -> Result<String, JsError> {
    call(json, clip_curve)
}

/// `{seed, tasks, steps, lr?}` → reward curve and before/after accuracy.
#[wasm_bindgen]
pub fn train(json: &str) -> Result<String, JsError> {
    call(json, toy_run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_facts() {
        let a = interval_report(&IntervalQuery { chosen: vec![[0.0, 4.0], [3.0, 6.0]], evidence: vec![[1.0, 2.0]] }).unwrap();
        assert_eq!(a.merged, vec![[0.0, 6.0]]);
        assert_eq!(a.measure, 6.0);
        assert!(!a.disjoint);
        assert!(a.covers_evidence);
        assert!(!a.disjoint_cover);
        assert_eq!(a.overlap_with_evidence, 1.0);
        assert!((a.iou - 1.0 / 6.0).abs() < 1e-12);
        assert!(interval_report(&IntervalQuery { chosen: vec![[3.0, 1.0]], evidence: vec![] }).is_err());
    }

    #[test]
    fn clip_curve_is_flat_outside_the_band_for_positive_advantage() {
        let pts = clip_curve(&ClipQuery { advantage: 1.0, eps_low: 0.2, eps_high: 0.28, lo: 0.5, hi: 1.5, points: 101 }).unwrap();
        for p in &pts {
            assert_eq!(p.flat, p.ratio > 1.28);
            assert!(p.term <= p.ratio + 1e-15);
        }
    }

    #[test]
    fn short_run_reports_curves() {
        let a = toy_run(&TrainQuery { seed: 1, tasks: 24, steps: 3, lr: None }).unwrap();
        assert_eq!(a.rewards.len(), 3);
        assert!((0.0..=1.0).contains(&a.accuracy_after));
    }

    #[test]
    fn json_entry_points() {
        assert!(call(r#"{"chosen":[[0,1]],"evidence":[[0,1]]}"#, interval_report).unwrap().contains("\"iou\":1.0"));
    }
}
