//! Synthetic-recovery fixtures for calibration.
#![allow(dead_code)]

use epiworld::calibrate::{objective, CalibrationConfig, Dataset, FreeParam};
use epiworld::filter::ObservationDensity;
use epiworld::params::ModelParams;
use epiworld::rng::RngStream;
use epiworld::scenarios::{gen_synthetic_with, SyntheticConfig, SyntheticRegion};
use rand::Rng;

pub const TRUE_BETA0: f64 = 1.4;

/// One region with `beta0 = 1.4`, no regime shocks and lognormal noise of sd `noise`.
pub fn synthetic_region(weeks: usize, noise: f64, seed: u64) -> SyntheticRegion {
    let cfg = SyntheticConfig {
        base: ModelParams { jump_prob: 0.0, obs_noise_sd: noise, survey_noise_sd: 0.02, ..Default::default() },
        beta0: [TRUE_BETA0; 2],
        ..Default::default()
    };
    gen_synthetic_with(1, weeks, seed, &cfg).unwrap().regions.remove(0)
}

pub fn dataset(region: &SyntheticRegion) -> Dataset {
    Dataset { actions: region.actions.clone(), observations: region.observations.clone() }
}

/// Grid over `beta0` with every other parameter at its generating value.
pub fn beta0_grid(region: &SyntheticRegion, noise: f64, particles: usize) -> CalibrationConfig {
    CalibrationConfig {
        free: vec![FreeParam { name: "beta0".into(), lower: 0.8, upper: 2.0, grid_points: 25 }],
        particles,
        base_params: region.params.clone(),
        density: ObservationDensity { cases_sd: noise, hosp_sd: noise, survey_sd: 0.02, ..Default::default() },
        ..Default::default()
    }
}

pub const PERTURBED: [&str; 5] = ["beta0", "gamma", "kappa", "ihr", "rho0"];

/// Calibration over every parameter in [`PERTURBED`], with bounds wide enough for any perturbation.
pub fn joint_config(region: &SyntheticRegion, noise: f64, particles: usize) -> CalibrationConfig {
    CalibrationConfig {
        free: PERTURBED
            .iter()
            .map(|n| FreeParam { name: n.to_string(), lower: 0.0, upper: 5.0, grid_points: 1 })
            .collect(),
        ..beta0_grid(region, noise, particles)
    }
}

/// Each coordinate moved by 5 to 30 percent in a random direction.
pub fn perturb(truth: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    truth
        .iter()
        .map(|v| {
            let size: f64 = rng.random_range(0.05..0.3);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (v * (1.0 + sign * size)).min(1.0)
        })
        .collect()
}

/// How many of `n` perturbed parameter vectors score no better than the
/// generating one, with objectives averaged over `seeds` filter seeds.
pub fn truth_wins(region: &SyntheticRegion, particles: usize, n: usize, seeds: u64) -> usize {
    let cfg = joint_config(region, 0.1, particles);
    let data = dataset(region);
    let avg = |theta: &[f64]| (0..seeds).map(|s| objective(&data, theta, &cfg, s).unwrap()).sum::<f64>() / seeds as f64;
    let truth: Vec<f64> = PERTURBED.iter().map(|n| region.params.get(n).unwrap()).collect();
    let at_truth = avg(&truth);
    let mut rng = RngStream::new(3).rng();
    (0..n).filter(|_| avg(&perturb(&truth, &mut rng)) <= at_truth).count()
}
