//! Proptest strategies for valid states, actions and parameters.
#![allow(dead_code)]

use epiworld::action::{Action, NUM_DIMS};
use epiworld::params::ModelParams;
use epiworld::state::LatentState;
use proptest::prelude::*;

pub fn action() -> impl Strategy<Value = Action> {
    (0u32..60, prop::array::uniform13(0u8..=4)).prop_map(|(w, dims)| Action::new(w, dims).unwrap())
}

/// A valid state with `hosp_lag` pipeline slots. Compartments are normalized
/// weights and pending admissions take a share of `I`.
pub fn state(hosp_lag: usize) -> impl Strategy<Value = LatentState> {
    (
        prop::array::uniform5(0.0f64..1.0),
        prop::collection::vec(0.0f64..1.0, hosp_lag),
        0.0f64..1.0,
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0),
        (0.05f64..=2.0, 0.2f64..3.0, 0.0f64..1.0),
    )
        .prop_filter("nonzero mass", |(w, ..)| w.iter().sum::<f64>() > 1e-3)
        .prop_map(move |(w, slots, pending_share, (iw, b, f), (mix, m, phase))| {
            let total: f64 = w.iter().sum();
            let mut x = LatentState::disease_free(hosp_lag);
            x.epi.s = w[0] / total;
            x.epi.e = w[1] / total;
            x.epi.i = w[2] / total;
            x.epi.r = w[3] / total;
            x.epi.hosp = 1.0 - x.epi.s - x.epi.e - x.epi.i - x.epi.r;
            if x.epi.hosp < 0.0 {
                x.epi.s += x.epi.hosp;
                x.epi.hosp = 0.0;
            }
            let slot_total: f64 = slots.iter().sum();
            if slot_total > 0.0 {
                let scale = pending_share * x.epi.i / slot_total;
                x.epi.hosp_pipeline = slots.iter().map(|s| s * scale).collect();
            }
            x.imm.w = iw;
            x.beh.b = b;
            x.beh.f = f;
            x.net.mixing_scale = mix;
            x.reg.m = m;
            x.reg.season_phase = phase;
            x
        })
}

pub fn params() -> impl Strategy<Value = ModelParams> {
    (
        (0.0f64..5.0, 0.0f64..=1.0, 0.01f64..=1.0, 0.0f64..=1.0, 0usize..5, 1.0f64..6.0),
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()),
    )
        .prop_map(
            |(
                (beta0, sigma, gamma, ihr, hosp_lag, hosp_stay),
                (kappa, waning_rate, lp, lr, ld),
                (jump, season, fg, det),
            )| {
                ModelParams {
                    beta0,
                    sigma,
                    gamma,
                    ihr,
                    hosp_lag,
                    hosp_stay,
                    kappa,
                    waning_rate,
                    lambda_p: lp,
                    lambda_r: lr,
                    lambda_d: ld,
                    fatigue_gain: fg,
                    jump_prob: jump,
                    season_amplitude: season,
                    deterministic: det,
                    ..Default::default()
                }
            },
        )
}

/// Parameters together with a state whose pipeline matches (or not) their lag.
pub fn params_and_state() -> impl Strategy<Value = (ModelParams, LatentState)> {
    (params(), 0usize..5).prop_flat_map(|(p, lag)| (Just(p), state(lag)))
}

pub fn dims_le(a: &Action, b: &Action) -> bool {
    (0..NUM_DIMS).all(|d| a.level(d) <= b.level(d))
}
