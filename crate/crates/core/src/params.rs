//! Model parameters. All rates are per week.

use serde::{Deserialize, Serialize};

use crate::action::{NUM_DIMS, TESTING_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Baseline transmission rate.
    pub beta0: f64,
    /// Fraction of E becoming infectious per week.
    pub sigma: f64,
    /// Fraction of the infectious pool leaving I per week.
    pub gamma: f64,
    /// Infection-hospitalization ratio.
    pub ihr: f64,
    /// Weeks between leaving the infectious pool and hospital admission.
    pub hosp_lag: usize,
    /// Mean weeks spent in hospital (discharge fraction `1 / hosp_stay`).
    pub hosp_stay: f64,
    /// Maximum behavioral transmission reduction.
    pub kappa: f64,
    pub waning_rate: f64,
    /// Compliance gain from stringency.
    pub lambda_p: f64,
    /// Compliance gain from perceived risk.
    pub lambda_r: f64,
    /// Compliance loss from fatigue.
    pub lambda_d: f64,
    /// Infected fraction at which perceived risk saturates.
    pub risk_scale: f64,
    pub fatigue_gain: f64,
    pub fatigue_decay: f64,
    /// Weekly probability of a regime shock to `m`.
    pub jump_prob: f64,
    /// Shocks multiply `m` by `exp(N(jump_log_mean, jump_log_sd^2))`.
    pub jump_log_mean: f64,
    pub jump_log_sd: f64,
    /// Amplitude of the sinusoidal seasonal modulation of `beta0`.
    pub season_amplitude: f64,
    /// Base ascertainment rate.
    pub rho0: f64,
    /// Relative ascertainment gain at full testing level.
    pub testing_gain: f64,
    /// Which action dim drives ascertainment.
    pub testing_dim: usize,
    /// Lognormal sigma of the case and hospitalization channels.
    pub obs_noise_sd: f64,
    /// Sd of the survey channel (truncated to [0, 1]).
    pub survey_noise_sd: f64,
    /// Simulation grain: individuals per unit population for binomial draws.
    pub grain: f64,
    /// Expectation mode: no sampling anywhere in the dynamics.
    pub deterministic: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            beta0: 1.4,
            sigma: 0.75,
            gamma: 0.7,
            ihr: 0.02,
            hosp_lag: 2,
            hosp_stay: 1.5,
            kappa: 0.6,
            waning_rate: 0.02,
            lambda_p: 0.08,
            lambda_r: 0.05,
            lambda_d: 0.05,
            risk_scale: 0.02,
            fatigue_gain: 0.05,
            fatigue_decay: 0.02,
            jump_prob: 0.01,
            jump_log_mean: 0.3,
            jump_log_sd: 0.1,
            season_amplitude: 0.0,
            rho0: 0.3,
            testing_gain: 1.0,
            testing_dim: TESTING_DIM,
            obs_noise_sd: 0.0,
            survey_noise_sd: 0.0,
            grain: 1e6,
            deterministic: false,
        }
    }
}

/// Names accepted by [`ModelParams::set`] and [`ModelParams::get`].
pub const TUNABLE: &[&str] = &[
    "beta0",
    "sigma",
    "gamma",
    "ihr",
    "hosp_stay",
    "kappa",
    "waning_rate",
    "lambda_p",
    "lambda_r",
    "lambda_d",
    "risk_scale",
    "fatigue_gain",
    "fatigue_decay",
    "jump_prob",
    "jump_log_mean",
    "jump_log_sd",
    "season_amplitude",
    "rho0",
    "testing_gain",
    "obs_noise_sd",
    "survey_noise_sd",
];

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let nonneg = [
            ("beta0", self.beta0),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("hosp_stay", self.hosp_stay),
            ("waning_rate", self.waning_rate),
            ("lambda_p", self.lambda_p),
            ("lambda_r", self.lambda_r),
            ("lambda_d", self.lambda_d),
            ("fatigue_gain", self.fatigue_gain),
            ("fatigue_decay", self.fatigue_decay),
            ("jump_log_sd", self.jump_log_sd),
            ("testing_gain", self.testing_gain),
            ("obs_noise_sd", self.obs_noise_sd),
            ("survey_noise_sd", self.survey_noise_sd),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} = {v} must be a nonnegative finite rate"));
            }
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("waning_rate", self.waning_rate),
            ("ihr", self.ihr),
            ("kappa", self.kappa),
            ("jump_prob", self.jump_prob),
            ("season_amplitude", self.season_amplitude),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.rho0 > 0.0 && self.rho0 <= 1.0) {
            problems.push(format!("rho0 = {} must lie in (0, 1]", self.rho0));
        }
        if !(self.risk_scale > 0.0 && self.risk_scale.is_finite()) {
            problems.push(format!("risk_scale = {} must be positive", self.risk_scale));
        }
        if !self.jump_log_mean.is_finite() {
            problems.push("jump_log_mean must be finite".into());
        }
        if self.gamma == 0.0 {
            problems.push("gamma = 0 gives a degenerate infectious sojourn".into());
        }
        if self.hosp_stay == 0.0 {
            problems.push("hosp_stay = 0 gives a degenerate hospital sojourn".into());
        } else if self.hosp_stay < 1.0 {
            problems.push(format!("hosp_stay = {} must be at least one week", self.hosp_stay));
        }
        if self.testing_dim >= NUM_DIMS {
            problems.push(format!("testing_dim = {} outside 0..13", self.testing_dim));
        }
        if !(self.grain >= 1.0 && self.grain.is_finite()) {
            problems.push(format!("grain = {} must be >= 1", self.grain));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems.join("; ")))
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "beta0" => self.beta0,
            "sigma" => self.sigma,
            "gamma" => self.gamma,
            "ihr" => self.ihr,
            "hosp_stay" => self.hosp_stay,
            "kappa" => self.kappa,
            "waning_rate" => self.waning_rate,
            "lambda_p" => self.lambda_p,
            "lambda_r" => self.lambda_r,
            "lambda_d" => self.lambda_d,
            "risk_scale" => self.risk_scale,
            "fatigue_gain" => self.fatigue_gain,
            "fatigue_decay" => self.fatigue_decay,
            "jump_prob" => self.jump_prob,
            "jump_log_mean" => self.jump_log_mean,
            "jump_log_sd" => self.jump_log_sd,
            "season_amplitude" => self.season_amplitude,
            "rho0" => self.rho0,
            "testing_gain" => self.testing_gain,
            "obs_noise_sd" => self.obs_noise_sd,
            "survey_noise_sd" => self.survey_noise_sd,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "beta0" => &mut self.beta0,
            "sigma" => &mut self.sigma,
            "gamma" => &mut self.gamma,
            "ihr" => &mut self.ihr,
            "hosp_stay" => &mut self.hosp_stay,
            "kappa" => &mut self.kappa,
            "waning_rate" => &mut self.waning_rate,
            "lambda_p" => &mut self.lambda_p,
            "lambda_r" => &mut self.lambda_r,
            "lambda_d" => &mut self.lambda_d,
            "risk_scale" => &mut self.risk_scale,
            "fatigue_gain" => &mut self.fatigue_gain,
            "fatigue_decay" => &mut self.fatigue_decay,
            "jump_prob" => &mut self.jump_prob,
            "jump_log_mean" => &mut self.jump_log_mean,
            "jump_log_sd" => &mut self.jump_log_sd,
            "season_amplitude" => &mut self.season_amplitude,
            "rho0" => &mut self.rho0,
            "testing_gain" => &mut self.testing_gain,
            "obs_noise_sd" => &mut self.obs_noise_sd,
            "survey_noise_sd" => &mut self.survey_noise_sd,
            _ => return Err(Error::InvalidParams(format!("unknown parameter {name:?}"))),
        };
        *slot = value;
        Ok(())
    }
}
