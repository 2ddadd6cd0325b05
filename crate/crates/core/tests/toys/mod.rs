//! Planning toys with known answers.
#![allow(dead_code, clippy::needless_range_loop)]

use epiworld::action::{Action, NUM_DIMS};
use epiworld::optimize::{advantages, cem_search, surrogate, surrogate_gradient, CemConfig, CemResult, GroupSample};
use epiworld::policy::{SoftmaxPolicy, NUM_FEATURES, NUM_LEVELS};

/// One week, 13 dims, score = sum of levels; the unique optimum is all fours.
pub fn cem_level_sum(config: &CemConfig, seed: u64) -> CemResult {
    cem_search(1, 0, config, seed, |cands| {
        Ok(cands.iter().map(|a| (a[0].dims().iter().map(|&l| l as f64).sum(), true)).collect())
    })
    .unwrap()
}

pub fn is_optimal(r: &CemResult) -> bool {
    r.actions == vec![Action::uniform(0, 4)]
}

/// A group of one-week samples that only move dims 0 and 1.
pub fn two_dim_group(levels: &[[u8; 2]], rewards: &[f64]) -> Vec<GroupSample> {
    levels
        .iter()
        .zip(rewards)
        .map(|(l, &r)| {
            let mut dims = [0u8; NUM_DIMS];
            dims[..2].copy_from_slice(l);
            GroupSample {
                features: vec![[1.0, 0.4, 1.3, 0.2]],
                actions: vec![Action::new(0, dims).unwrap()],
                reward: r,
            }
        })
        .collect()
}

pub fn varied_policy(temperature: f64) -> SoftmaxPolicy {
    let mut p = SoftmaxPolicy::zeros(temperature);
    for (d, levels) in p.weights.iter_mut().enumerate() {
        for (l, w) in levels.iter_mut().enumerate() {
            for (f, v) in w.iter_mut().enumerate() {
                *v = (((d * 17 + l * 5 + f * 3) % 13) as f64 - 6.0) * 0.07;
            }
        }
    }
    p
}

/// Max abs difference between the analytic surrogate gradient and central
/// finite differences over the weights of dims 0 and 1.
pub fn grpo_gradient_error() -> f64 {
    let p = varied_policy(0.8);
    let group = two_dim_group(&[[0, 1], [2, 3], [4, 4], [1, 0], [3, 2]], &[0.3, -1.0, 2.0, 0.1, 0.7]);
    let rewards: Vec<f64> = group.iter().map(|g| g.reward).collect();
    let adv = advantages(&rewards).unwrap();
    let grad = surrogate_gradient(&p, &group, &adv);
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    for d in 0..2 {
        for l in 0..NUM_LEVELS {
            for f in 0..NUM_FEATURES {
                let mut up = p.clone();
                up.weights[d][l][f] += h;
                let mut dn = p.clone();
                dn.weights[d][l][f] -= h;
                let fd = (surrogate(&up, &group, &adv) - surrogate(&dn, &group, &adv)) / (2.0 * h);
                max_err = max_err.max((fd - grad[d][l][f]).abs());
            }
        }
    }
    max_err
}
