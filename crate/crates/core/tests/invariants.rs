//! Property tests over the public API.

use omnirl::config::RunConfig;
use omnirl::gspo::{clip_active, clipped_term};
use omnirl::interval::{segment_iou, SegmentSet, TimeSpan};
use omnirl::policy::{FactoredCategoricalPolicy, PolicyConfig, PromptContext, SequencePolicy, NUM_FEATURES};
use omnirl::reward::{attention_reward_over, RewardBreakdown, RewardWeights};
use omnirl::runtime::Checkpoint;
use omnirl::util::rng_stream;
use omnirl::world::{feasible_options, generate_corpus, solve, GenParams, ModalitySetting};
use omnirl::orchestrator::{Stage, TrainState};
use proptest::prelude::*;
use rand::Rng;

fn arb_set() -> impl Strategy<Value = SegmentSet> {
    prop::collection::vec((0.0f64..60.0, 0.01f64..15.0), 0..6)
        .prop_map(|v| SegmentSet::new(v.into_iter().map(|(a, l)| TimeSpan::new(a, a + l).unwrap()).collect()))
}

proptest! {
    #[test]
    fn merging_preserves_measure_and_is_idempotent(s in arb_set()) {
        let m = s.merge_overlaps();
        prop_assert!(m.pairwise_disjoint());
        prop_assert!((m.measure() - s.measure()).abs() < 1e-9);
        prop_assert_eq!(m.merge_overlaps(), m.clone());
        prop_assert!(s.measure() <= s.total_length() + 1e-9);
    }

    #[test]
    fn iou_is_a_symmetric_similarity(a in arb_set(), b in arb_set()) {
        let x = segment_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - segment_iou(&b, &a)).abs() < 1e-12);
        if a.measure() > 0.0 {
            prop_assert!((segment_iou(&a, &a) - 1.0).abs() < 1e-12);
        }
        let inter = a.intersection_measure(&b);
        prop_assert!(inter <= a.measure().min(b.measure()) + 1e-9);
    }

    #[test]
    fn disjoint_cover_implies_both_parts(a in arb_set(), b in arb_set()) {
        if a.disjoint_cover(&b) {
            prop_assert!(a.pairwise_disjoint());
            prop_assert!(a.union_covers(&b));
        }
        prop_assert!(a.union_covers(&SegmentSet::empty()));
    }

    #[test]
    fn clipped_term_is_pessimistic(s in 0.5f64..1.5, adv in -3.0f64..3.0, lo in 1e-4f64..0.3, hi in 1e-4f64..0.3) {
        let t = clipped_term(s, adv, lo, hi);
        prop_assert!(t <= s * adv + 1e-15);
        // a flat region has no slope in s
        if clip_active(s, adv, lo, hi) {
            let h = 1e-7;
            if clip_active(s + h, adv, lo, hi) {
                prop_assert_eq!(clipped_term(s + h, adv, lo, hi), t);
            }
        }
    }

    #[test]
    fn contrast_bonus_is_zero_or_alpha_and_monotone(full in 0.0f64..1.0, v in 0.0f64..1.0, a in 0.0f64..1.0, alpha in 0.0f64..1.0, up in 0.0f64..1.0) {
        let r = attention_reward_over(full, &[v, a], alpha);
        prop_assert!(r == 0.0 || r == alpha);
        if r == alpha {
            prop_assert_eq!(attention_reward_over((full + up).min(1.0), &[v, a], alpha), alpha);
        }
    }

    #[test]
    fn totals_are_bounded_and_gated_by_format(fmt in prop::sample::select(vec![0.0, 1.0]), ans in 0.0f64..=1.0, cons in 0.0f64..=1.0, comp in 0.0f64..=1.0, attn in 0.0f64..=1.0) {
        let w = RewardWeights::default();
        let qi = RewardBreakdown::qi(fmt, ans, cons, comp, &w);
        let ma = RewardBreakdown::ma(fmt, ans, attn, &w);
        prop_assert!((0.0..=3.0 + 1e-12).contains(&qi.total));
        prop_assert!((0.0..=3.0 + 1e-12).contains(&ma.total));
        if fmt == 0.0 {
            prop_assert_eq!(qi.total, 0.0);
            prop_assert_eq!(ma.total, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_tasks_are_solvable_and_reproducible(seed in any::<u64>(), n in 1usize..12) {
        let p = GenParams { n_tasks: n, ..GenParams::default() };
        let a = generate_corpus(seed, &p).unwrap();
        prop_assert_eq!(&a, &generate_corpus(seed, &p).unwrap());
        for t in &a {
            prop_assert_eq!(solve(t, &t.content), Some(t.answer_index()));
            for s in ModalitySetting::ALL {
                prop_assert!(feasible_options(t, s).contains(&t.answer_index()));
            }
        }
    }

    #[test]
    fn sampled_logprobs_match_rescoring(seed in any::<u64>(), scale in 0.0f64..3.0, temp in prop::sample::select(vec![1.0])) {
        let tasks = generate_corpus(seed, &GenParams { n_tasks: 3, ..GenParams::default() }).unwrap();
        let mut rng = rng_stream(seed, &[1]);
        let params: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.gen_range(-scale..=scale)).collect();
        let p = FactoredCategoricalPolicy::from_params(PolicyConfig::default(), params).unwrap();
        for t in &tasks {
            let ctx = PromptContext::new(t, ModalitySetting::Av).unwrap();
            let s = p.sample(&ctx, &mut rng, temp);
            let again = p.token_logprobs(&ctx, &s.actions).unwrap();
            prop_assert_eq!(&again, &s.logprobs);
            prop_assert!(again.iter().all(|l| *l <= 0.0 && l.is_finite()));
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(params in prop::collection::vec(-1e6f64..1e6, NUM_FEATURES), step in 0usize..10_000) {
        let policy = FactoredCategoricalPolicy::from_params(PolicyConfig::default(), params).unwrap();
        let mut state = TrainState::new(policy);
        state.step = step;
        let c = Checkpoint { stage: Stage::Qi, config_digest: "c".into(), corpus_digest: "d".into(), state };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        prop_assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn config_survives_toml(seed in 0..=i64::MAX as u64, steps in 1usize..1000, alpha in 0.0f64..1.0) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.trainer.total_steps = steps;
        cfg.stage.alpha = alpha;
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }
}
