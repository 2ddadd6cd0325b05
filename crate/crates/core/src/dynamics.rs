//! Controlled weekly transition kernel.
//!
//! Interventions act on transmission only through behavior: the action's
//! stringency moves compliance, and compliance scales the contact rate by
//! `1 - kappa * b`. Flows between compartments are chain-binomial draws at
//! simulation grain `N_sim`, or their expectations in deterministic mode.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::RngStream;
use crate::state::LatentState;

pub const WEEKS_PER_SEASON: f64 = 52.0;
const JUMP_KEY: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorResponse {
    pub effective_contact_multiplier: f64,
    pub next_compliance: f64,
    pub next_fatigue: f64,
}

pub fn behavior_response(x: &LatentState, a: &Action, params: &ModelParams) -> BehaviorResponse {
    let s = a.stringency();
    let perceived_risk = (x.epi.i / params.risk_scale).min(1.0);
    let b = x.beh.b + params.lambda_p * s + params.lambda_r * perceived_risk - params.lambda_d * x.beh.f;
    let b = b.clamp(0.0, 1.0);
    let f = (x.beh.f + params.fatigue_gain * s - params.fatigue_decay).clamp(0.0, 1.0);
    BehaviorResponse { effective_contact_multiplier: 1.0 - params.kappa * b, next_compliance: b, next_fatigue: f }
}

fn seasonal_factor(x: &LatentState, params: &ModelParams) -> f64 {
    1.0 + params.season_amplitude * (TAU * x.reg.season_phase).sin()
}

/// Transmission rate with regime, mixing, season and the given behavior multiplier applied.
pub fn effective_beta(x: &LatentState, params: &ModelParams, contact_multiplier: f64) -> f64 {
    params.beta0 * x.reg.m * x.net.mixing_scale * contact_multiplier * seasonal_factor(x, params)
}

/// Next-generation estimate `(beta_eff / gamma) * S` under current behavior and regime.
pub fn effective_r(x: &LatentState, params: &ModelParams) -> Result<f64> {
    if params.gamma == 0.0 {
        return Err(Error::InvalidParams("effective_R undefined for gamma = 0".into()));
    }
    let beta = effective_beta(x, params, 1.0 - params.kappa * x.beh.b);
    Ok((beta / params.gamma * x.epi.s).max(0.0))
}

/// Expected new-infection fraction of the next step under `a`.
pub fn expected_new_infections(x: &LatentState, a: &Action, params: &ModelParams) -> f64 {
    let resp = behavior_response(x, a, params);
    let beta = effective_beta(x, params, resp.effective_contact_multiplier);
    x.epi.s * (1.0 - (-beta * infectious_pool(x)).exp())
}

/// Infected mass that still transmits: `I` minus admissions already scheduled.
pub fn infectious_pool(x: &LatentState) -> f64 {
    (x.epi.i - x.pending_admissions()).max(0.0)
}

/// Draws how much of `mass` moves with probability `p`. Each flow reads its
/// own substream so paired runs stay aligned whatever the binomial sampler
/// consumes.
struct FlowSampler {
    rng: Option<RngStream>,
    grain: f64,
    next: u64,
}

impl FlowSampler {
    fn draw(&mut self, mass: f64, p: f64) -> f64 {
        let key = self.next;
        self.next += 1;
        let p = p.clamp(0.0, 1.0);
        if mass <= 0.0 || p == 0.0 {
            return 0.0;
        }
        match &self.rng {
            None => mass * p,
            Some(rng) => binomial_fraction(mass, p, self.grain, &mut rng.child(key).rng()),
        }
    }
}

fn binomial_fraction(mass: f64, p: f64, grain: f64, rng: &mut impl Rng) -> f64 {
    let n = (mass * grain).round() as u64;
    if n == 0 {
        return 0.0;
    }
    let k = Binomial::new(n, p).expect("valid binomial").sample(rng);
    (k as f64 / grain).min(mass)
}

/// Draws the new-infection fraction from a susceptible fraction `s` at grain
/// `grain`: `Binomial(round(s * grain), p) / grain`, capped at `s`.
pub fn sample_flow(mass: f64, p: f64, grain: f64, rng: &mut impl Rng) -> f64 {
    if mass <= 0.0 || p <= 0.0 {
        return 0.0;
    }
    binomial_fraction(mass, p.min(1.0), grain, rng)
}

fn resize_pipeline(pipeline: &mut Vec<f64>, lag: usize) {
    if pipeline.len() > lag {
        let overflow: f64 = pipeline.drain(lag..).sum();
        match pipeline.last_mut() {
            Some(last) => *last += overflow,
            None => pipeline.push(overflow),
        }
    }
    while pipeline.len() < lag {
        pipeline.push(0.0);
    }
}

/// One week of dynamics under action `a`.
pub fn step(x: &LatentState, a: &Action, params: &ModelParams, rng: RngStream) -> Result<LatentState> {
    if params.gamma == 0.0 || params.hosp_stay == 0.0 {
        return Err(Error::InvalidParams("gamma and hosp_stay must be positive".into()));
    }
    let resp = behavior_response(x, a, params);
    let beta = effective_beta(x, params, resp.effective_contact_multiplier);

    let stochastic = !params.deterministic;
    let mut flows = FlowSampler { rng: stochastic.then_some(rng), grain: params.grain, next: 0 };

    let epi = &x.epi;
    let mut pipeline = epi.hosp_pipeline.clone();
    resize_pipeline(&mut pipeline, params.hosp_lag);
    let pending: f64 = pipeline.iter().sum();
    let infectious_free = (epi.i - pending).max(0.0);

    // Infection is a competing-hazard draw; the other flows are weekly fractions.
    let new_inf = flows.draw(epi.s, 1.0 - (-beta * infectious_free).exp());
    let progressed = flows.draw(epi.e, params.sigma);
    let left_i = flows.draw(infectious_free, params.gamma);
    let bound_for_hosp = flows.draw(left_i, params.ihr);
    let recovered = left_i - bound_for_hosp;
    let discharged = flows.draw(epi.hosp, 1.0 / params.hosp_stay);
    let waned = flows.draw(epi.r, params.waning_rate * (1.0 - x.imm.w));

    let admitted = if pipeline.is_empty() {
        bound_for_hosp
    } else {
        let due = pipeline.remove(0);
        pipeline.push(bound_for_hosp);
        due
    };

    let s = epi.s - new_inf + waned;
    let e = epi.e + new_inf - progressed;
    let i = epi.i + progressed - recovered - admitted;
    let r_kept = epi.r - waned;
    let r = r_kept + recovered + discharged;
    let hosp = epi.hosp + admitted - discharged;

    let w = if r > 0.0 {
        let decayed = x.imm.w * (1.0 - params.waning_rate);
        ((decayed * r_kept + recovered + discharged) / r).clamp(0.0, 1.0)
    } else {
        x.imm.w
    };

    let mut m = x.reg.m;
    if stochastic {
        let mut rng = rng.child(JUMP_KEY).rng();
        if rng.random::<f64>() < params.jump_prob {
            let z: f64 = StandardNormal.sample(&mut rng);
            m *= (params.jump_log_mean + params.jump_log_sd * z).exp();
        }
    }
    let season_phase = (x.reg.season_phase + 1.0 / WEEKS_PER_SEASON).fract();

    let mut next = x.clone();
    next.epi.s = s.max(0.0);
    next.epi.e = e.max(0.0);
    next.epi.i = i.max(0.0);
    next.epi.r = r.max(0.0);
    next.epi.hosp = hosp.max(0.0);
    next.epi.new_infections = new_inf;
    next.epi.hosp_admissions = admitted;
    next.epi.hosp_pipeline = pipeline;
    next.imm.w = w;
    next.beh.b = resp.next_compliance;
    next.beh.f = resp.next_fatigue;
    next.reg.m = m;
    next.reg.season_phase = season_phase;
    Ok(next)
}

/// Moves `fraction` of the population (capped at `S`) from S to R with full protection.
pub fn apply_vaccination(x: &LatentState, fraction: f64) -> LatentState {
    let moved = fraction.max(0.0).min(x.epi.s);
    if moved == 0.0 {
        return x.clone();
    }
    let mut next = x.clone();
    let r = x.epi.r + moved;
    next.imm.w = ((x.imm.w * x.epi.r + moved) / r).clamp(0.0, 1.0);
    next.epi.s = x.epi.s - moved;
    next.epi.r = r;
    next
}
