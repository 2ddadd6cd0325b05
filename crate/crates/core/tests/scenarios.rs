#![allow(clippy::needless_range_loop)]

use epiworld::observation::{report_as_of, stabilization_time, MisreportingRegime, RevisionProfile, RevisionTriangle};
use epiworld::scenarios::{
    counterfactual_verdict, run_case_backfill, run_case_counterfactual, run_case_misreporting, run_misreporting_regime,
    simulate_case_counts, ScenarioConfig,
};
use proptest::prelude::*;

fn det() -> ScenarioConfig {
    ScenarioConfig::default().with_deterministic(true)
}

#[test]
fn misreporting_deterministic_ordering_holds() {
    let r = run_case_misreporting(&det()).unwrap();
    assert!(r.deterministic);
    assert!(r.verdict, "{:?}", r.seeds);
    let s = &r.seeds[0];
    assert!(s.none.unwrap() < s.pure.unwrap_or(u32::MAX));
}

#[test]
fn misreporting_stochastic_passes_four_of_five() {
    let r = run_case_misreporting(&ScenarioConfig::default()).unwrap();
    assert!(!r.deterministic);
    assert_eq!(r.seeds.len(), 5);
    assert!(r.pass_rate >= 0.8, "{:?}", r.seeds);
    assert!(r.verdict);
}

#[test]
fn misreporting_report_is_reproducible() {
    let c = ScenarioConfig::default();
    assert_eq!(run_case_misreporting(&c).unwrap(), run_case_misreporting(&c).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixed_with_no_over_reporters_is_none(seed in 0u64..1000, delta in 0.0f64..1.0) {
        let base = ScenarioConfig::default();
        let (w0, r0) = run_misreporting_regime(&base, MisreportingRegime::none(), seed).unwrap();
        let (w1, r1) = run_misreporting_regime(&base, MisreportingRegime::mixed(0.0, delta), seed).unwrap();
        prop_assert_eq!(w0, w1);
        prop_assert_eq!(r0.states, r1.states);
        prop_assert_eq!(r0.actions, r1.actions);
    }

    #[test]
    fn zero_inflation_makes_regimes_identical(seed in 0u64..1000, fr in 0.0f64..1.0) {
        let base = ScenarioConfig::default();
        let (w0, r0) = run_misreporting_regime(&base, MisreportingRegime::none(), seed).unwrap();
        for regime in [MisreportingRegime::mixed(fr, 0.0), MisreportingRegime::pure(0.0)] {
            let (w, r) = run_misreporting_regime(&base, regime, seed).unwrap();
            prop_assert_eq!(w0, w);
            prop_assert_eq!(&r0.states, &r.states);
        }
    }
}

#[test]
fn backfill_fast_stabilizes_sooner_than_slow() {
    let c = ScenarioConfig::default();
    for seed in 1..=5 {
        let r = run_case_backfill(&c, &c.backfill.profiles, c.backfill.tol, seed).unwrap();
        let fast = r.profile("fast").unwrap();
        let slow = r.profile("slow").unwrap();
        assert!(fast.median_stabilization < slow.median_stabilization, "seed {seed}");
        assert!(r.profile("none").unwrap().stabilization.iter().all(|&k| k == 0));
        for p in &r.profiles {
            assert!(p.stabilization.iter().all(|&k| k <= p.max_lag));
        }
    }
}

#[test]
fn reports_are_exact_from_the_maximum_lag() {
    let c = ScenarioConfig::default();
    let finals = simulate_case_counts(&c, 4).unwrap();
    for profile in [RevisionProfile::fast(), RevisionProfile::slow()] {
        let tri = RevisionTriangle::from_finals(&finals, &profile).unwrap();
        let k = tri.max_lag();
        for t in 0..tri.weeks() {
            assert_eq!(report_as_of(&tri, t, t + k).unwrap(), finals[t]);
            assert_eq!(report_as_of(&tri, t, t + k + 7).unwrap(), finals[t]);
            assert!(report_as_of(&tri, t, t).unwrap() <= finals[t]);
            assert!(stabilization_time(&tri, t, 0.05).unwrap() <= k);
        }
    }
}

#[test]
fn counterfactual_verdict_is_seed_free_when_deterministic() {
    let first = run_case_counterfactual(&det(), 1).unwrap();
    assert!(first.verdict.verdict, "{:?}", first.verdict);
    assert!(first.verdict.prefix_identical);
    assert!(first.verdict.counterfactual_peak < first.verdict.baseline_peak);
    for seed in 2..=5 {
        let r = run_case_counterfactual(&det(), seed).unwrap();
        assert_eq!(r.verdict, first.verdict);
    }
}

#[test]
fn counterfactual_prefix_matches_in_the_stochastic_world() {
    let c = ScenarioConfig::default();
    let d = c.counterfactual.divergence_week;
    for seed in 1..=5 {
        let r = run_case_counterfactual(&c, seed).unwrap();
        assert!(r.verdict.prefix_identical);
        assert_eq!(r.baseline.states[..d], r.counterfactual.states[..d]);
        assert_ne!(r.baseline.states[d..], r.counterfactual.states[d..]);
    }
}

#[test]
fn swapping_the_plans_flips_the_verdict() {
    let r = run_case_counterfactual(&det(), 1).unwrap();
    let d = det().counterfactual.divergence_week;
    let swapped = counterfactual_verdict(&r.counterfactual, &r.baseline, d);
    assert!(swapped.diverged);
    assert!(!swapped.lower_peak && !swapped.verdict);
}
