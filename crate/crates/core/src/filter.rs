//! Bootstrap particle filter.
//!
//! The filter is generic over [`StateSpaceModel`] so the same recursion runs
//! the epidemic model and small test models with exact likelihoods. With the
//! transition kernel as proposal, the accumulated log mean weight is the
//! filter's estimate of `log p(o_1:T | a_1:T)`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::dynamics;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::observation::{expected_observation, MisreportingRegime, Observation};
use crate::params::ModelParams;
use crate::rng::{purpose, RngStream};
use crate::state::{Beh, Epi, Imm, LatentState, Net, Reg};

/// Floor added to count channels before taking logs.
pub const COUNT_FLOOR: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub trait StateSpaceModel: Sync {
    type State: Clone + Send + Sync;
    type Control: Sync;
    type Obs: Sync;

    fn propagate(&self, x: &Self::State, u: &Self::Control, rng: RngStream) -> Result<Self::State>;

    /// `log p(obs | x, u)`; `-inf` when impossible.
    fn log_likelihood(&self, obs: &Self::Obs, x: &Self::State, u: &Self::Control) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleBelief<S> {
    pub particles: Vec<S>,
    /// Normalized: `sum(exp(log_weights)) == 1`.
    pub log_weights: Vec<f64>,
    pub cum_loglik: f64,
    pub week: u32,
}

pub type Belief = ParticleBelief<LatentState>;

impl<S> ParticleBelief<S> {
    pub fn uniform(particles: Vec<S>, week: u32) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Empty("particle set"));
        }
        let lw = -(particles.len() as f64).ln();
        Ok(ParticleBelief { log_weights: vec![lw; particles.len()], particles, cum_loglik: 0.0, week })
    }

    pub fn particle_count(&self) -> usize {
        self.particles.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights())
    }

    /// Weighted mean of `f` over particles.
    pub fn mean<F: Fn(&S) -> f64>(&self, f: F) -> f64 {
        self.particles.iter().zip(self.weights()).map(|(p, w)| w * f(p)).sum()
    }

    /// Draws a particle index proportionally to weight.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights().into_iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.particles.len() - 1
    }
}

/// Effective sample size `1 / sum(w_i^2)` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sq
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_resample(weights: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let offset: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = offset + i as f64 / n as f64;
        while u > cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    /// Resample when `ESS < resample_threshold * P`.
    pub resample_threshold: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings { resample_threshold: 0.5, execution: Execution::default() }
    }
}

/// One predict-weight-resample cycle. `week` is stamped on the result.
pub fn update<M: StateSpaceModel>(
    model: &M,
    bel: &ParticleBelief<M::State>,
    u: &M::Control,
    obs: &M::Obs,
    settings: &FilterSettings,
    rng: RngStream,
    week: u32,
) -> Result<ParticleBelief<M::State>> {
    let n = bel.particles.len();
    let dyn_rng = rng.child(purpose::DYNAMICS);
    let propagated: Vec<(M::State, f64)> = settings
        .execution
        .map_slice(&bel.particles, |i, x| {
            let next = model.propagate(x, u, dyn_rng.child(i as u64))?;
            let ll = model.log_likelihood(obs, &next, u);
            Ok((next, ll))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let unnorm: Vec<f64> = propagated
        .iter()
        .zip(&bel.log_weights)
        .map(|((_, ll), lw)| if ll.is_nan() { f64::NEG_INFINITY } else { lw + ll })
        .collect();
    let increment = log_sum_exp(&unnorm);
    if !increment.is_finite() {
        return Err(Error::ObservationImpossible);
    }
    let log_weights: Vec<f64> = unnorm.iter().map(|lw| lw - increment).collect();
    let particles: Vec<M::State> = propagated.into_iter().map(|(x, _)| x).collect();
    let mut next = ParticleBelief { particles, log_weights, cum_loglik: bel.cum_loglik + increment, week };

    if next.ess() < settings.resample_threshold * n as f64 {
        next = resample(&next, rng.child(purpose::RESAMPLE));
    }
    Ok(next)
}

/// Systematic resampling to uniform weights; `cum_loglik` is carried over.
pub fn resample<S: Clone>(bel: &ParticleBelief<S>, rng: RngStream) -> ParticleBelief<S> {
    let n = bel.particles.len();
    let idx = systematic_resample(&bel.weights(), n, &mut rng.rng());
    let particles = idx.into_iter().map(|j| bel.particles[j].clone()).collect();
    ParticleBelief { particles, log_weights: vec![-(n as f64).ln(); n], cum_loglik: bel.cum_loglik, week: bel.week }
}

/// Which channels contribute to the observation density, and their spreads.
///
/// Counts use a Gaussian density on `ln(y + 1e-6)`; the survey uses a normal
/// truncated to [0, 1]. A spread of zero switches that channel to a point
/// mass (log density 0 on an exact match, `-inf` otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationDensity {
    pub use_cases: bool,
    pub use_hosp: bool,
    pub use_survey: bool,
    pub cases_sd: f64,
    pub hosp_sd: f64,
    pub survey_sd: f64,
}

impl Default for ObservationDensity {
    fn default() -> Self {
        ObservationDensity {
            use_cases: true,
            use_hosp: true,
            use_survey: true,
            cases_sd: 0.2,
            hosp_sd: 0.2,
            survey_sd: 0.05,
        }
    }
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2))
}

const POINT_MASS_TOL: f64 = 1e-9;

fn point_mass(x: f64, mean: f64) -> f64 {
    if (x - mean).abs() <= POINT_MASS_TOL * (1.0 + mean.abs()) {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

impl ObservationDensity {
    pub fn log_count(&self, observed: f64, predicted: f64, sd: f64) -> f64 {
        let y = (observed.max(0.0) + COUNT_FLOOR).ln();
        let mu = (predicted.max(0.0) + COUNT_FLOOR).ln();
        if sd == 0.0 {
            point_mass(y, mu)
        } else {
            normal_log_pdf(y, mu, sd)
        }
    }

    pub fn log_survey(&self, observed: f64, predicted: f64) -> f64 {
        let sd = self.survey_sd;
        if sd == 0.0 {
            return point_mass(observed, predicted);
        }
        let mass = normal_cdf((1.0 - predicted) / sd) - normal_cdf(-predicted / sd);
        if !(0.0..=1.0).contains(&observed) || mass <= 0.0 {
            return f64::NEG_INFINITY;
        }
        normal_log_pdf(observed, predicted, sd) - mass.ln()
    }

    pub fn log_density(&self, o: &Observation, predicted: &Observation) -> f64 {
        let mut ll = 0.0;
        if self.use_cases {
            ll += self.log_count(o.reported_cases_per_100k, predicted.reported_cases_per_100k, self.cases_sd);
        }
        if self.use_hosp {
            ll += self.log_count(o.hosp_per_100k, predicted.hosp_per_100k, self.hosp_sd);
        }
        if self.use_survey {
            ll += self.log_survey(o.survey_compliance, predicted.survey_compliance);
        }
        ll
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub particles: usize,
    pub density: ObservationDensity,
    pub settings: FilterSettings,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { particles: 500, density: ObservationDensity::default(), settings: FilterSettings::default() }
    }
}

/// The epidemic model seen through the filter's interface.
pub struct EpiModel<'a> {
    pub params: &'a ModelParams,
    pub regime: &'a MisreportingRegime,
    pub density: &'a ObservationDensity,
}

impl StateSpaceModel for EpiModel<'_> {
    type State = LatentState;
    type Control = Action;
    type Obs = Observation;

    fn propagate(&self, x: &LatentState, a: &Action, rng: RngStream) -> Result<LatentState> {
        dynamics::step(x, a, self.params, rng)
    }

    fn log_likelihood(&self, o: &Observation, x: &LatentState, a: &Action) -> f64 {
        let predicted = expected_observation(x, a, self.regime, self.params);
        self.density.log_density(o, &predicted)
    }
}

/// Advances the belief by one week: propagate under `a`, weight by `o`.
pub fn filter_step(
    bel: &Belief,
    a: &Action,
    o: &Observation,
    params: &ModelParams,
    regime: &MisreportingRegime,
    config: &FilterConfig,
    rng: RngStream,
) -> Result<Belief> {
    if o.week != bel.week + 1 {
        return Err(Error::WeekMismatch { expected: bel.week + 1, got: o.week });
    }
    let model = EpiModel { params, regime, density: &config.density };
    update(&model, bel, a, o, &config.settings, rng, o.week)
}

/// Runs the filter over paired `(a_t, o_{t+1})` data, returning every
/// intermediate belief (index 0 is the initial belief).
pub fn run_filter(
    initial: Belief,
    actions: &[Action],
    observations: &[Observation],
    params: &ModelParams,
    regime: &MisreportingRegime,
    config: &FilterConfig,
    rng: RngStream,
) -> Result<Vec<Belief>> {
    if actions.len() != observations.len() {
        return Err(Error::LengthMismatch { left: actions.len(), right: observations.len() });
    }
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(initial);
    for (t, (a, o)) in actions.iter().zip(observations).enumerate() {
        let next = filter_step(out.last().unwrap(), a, o, params, regime, config, rng.child(t as u64))?;
        out.push(next);
    }
    Ok(out)
}

/// Uniform box prior over the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub infected: [f64; 2],
    pub exposed: [f64; 2],
    pub recovered: [f64; 2],
    pub compliance: [f64; 2],
    pub transmissibility: [f64; 2],
    pub mixing_scale: f64,
    pub immunity: f64,
    pub hosp_lag: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            infected: [0.002, 0.01],
            exposed: [0.001, 0.01],
            recovered: [0.0, 0.0],
            compliance: [0.0, 0.2],
            transmissibility: [0.9, 1.1],
            mixing_scale: 1.0,
            immunity: 1.0,
            hosp_lag: 2,
        }
    }
}

impl PriorConfig {
    /// Prior concentrated on a single state.
    pub fn point(x: &LatentState) -> Self {
        PriorConfig {
            infected: [x.epi.i; 2],
            exposed: [x.epi.e; 2],
            recovered: [x.epi.r; 2],
            compliance: [x.beh.b; 2],
            transmissibility: [x.reg.m; 2],
            mixing_scale: x.net.mixing_scale,
            immunity: x.imm.w,
            hosp_lag: x.epi.hosp_pipeline.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("infected", self.infected),
            ("exposed", self.exposed),
            ("recovered", self.recovered),
            ("compliance", self.compliance),
            ("transmissibility", self.transmissibility),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!("prior range {name} = [{lo}, {hi}] is empty")));
            }
            if lo < 0.0 {
                return Err(Error::InvalidConfig(format!("prior range {name} must be nonnegative")));
            }
        }
        if self.infected[1] + self.exposed[1] + self.recovered[1] > 1.0 {
            return Err(Error::InvalidConfig("prior ranges allow I + E + R > 1".into()));
        }
        if self.compliance[1] > 1.0 || self.transmissibility[0] <= 0.0 {
            return Err(Error::InvalidConfig("prior compliance must be <= 1 and transmissibility > 0".into()));
        }
        if !(self.mixing_scale > 0.0 && self.mixing_scale <= 2.0) || !(0.0..=1.0).contains(&self.immunity) {
            return Err(Error::InvalidConfig("prior mixing_scale or immunity out of range".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> LatentState {
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { lo + (hi - lo) * rng.random::<f64>() };
        let i = draw(self.infected);
        let e = draw(self.exposed);
        let r = draw(self.recovered);
        let b = draw(self.compliance);
        let m = draw(self.transmissibility);
        LatentState {
            epi: Epi {
                s: 1.0 - i - e - r,
                e,
                i,
                r,
                hosp: 0.0,
                new_infections: 0.0,
                hosp_admissions: 0.0,
                hosp_pipeline: vec![0.0; self.hosp_lag],
            },
            imm: Imm { w: self.immunity },
            net: Net { mixing_scale: self.mixing_scale },
            beh: Beh { b, f: 0.0 },
            reg: Reg { m, season_phase: 0.0 },
        }
    }
}

pub fn init_belief(prior: &PriorConfig, particles: usize, rng: RngStream) -> Result<Belief> {
    if particles == 0 {
        return Err(Error::Empty("particle count"));
    }
    prior.validate()?;
    let root = rng.child(purpose::PRIOR);
    let ps = (0..particles).map(|i| prior.sample(&mut root.child(i as u64).rng())).collect();
    Belief::uniform(ps, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Weighted `q`-quantile: smallest value whose cumulative weight reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i] / total;
        if acc >= q - 1e-12 {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

fn quantiles(values: &[f64], weights: &[f64]) -> Quantiles {
    Quantiles {
        mean: values.iter().zip(weights).map(|(v, w)| v * w).sum(),
        q05: weighted_quantile(values, weights, 0.05),
        q95: weighted_quantile(values, weights, 0.95),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSummary {
    pub week: u32,
    pub ess: f64,
    pub cum_loglik: f64,
    pub infected: Quantiles,
    pub compliance: Quantiles,
    pub transmissibility: Quantiles,
    pub effective_r: Quantiles,
}

pub fn summarize(bel: &Belief, params: &ModelParams) -> BeliefSummary {
    let w = bel.weights();
    let col = |f: &dyn Fn(&LatentState) -> f64| bel.particles.iter().map(f).collect::<Vec<_>>();
    let r: Vec<f64> = col(&|x| dynamics::effective_r(x, params).unwrap_or(f64::NAN));
    BeliefSummary {
        week: bel.week,
        ess: ess(&w),
        cum_loglik: bel.cum_loglik,
        infected: quantiles(&col(&|x| x.epi.i), &w),
        compliance: quantiles(&col(&|x| x.beh.b), &w),
        transmissibility: quantiles(&col(&|x| x.reg.m), &w),
        effective_r: quantiles(&r, &w),
    }
}

/// Belief summary CSV: one row per week with mean/5th/95th of I, b, m, effective_R.
pub fn write_summary_csv<W: Write>(rows: &[BeliefSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "week",
        "ess",
        "cum_loglik",
        "I_mean",
        "I_q05",
        "I_q95",
        "b_mean",
        "b_q05",
        "b_q95",
        "m_mean",
        "m_q05",
        "m_q95",
        "effective_R_mean",
        "effective_R_q05",
        "effective_R_q95",
    ])?;
    for s in rows {
        let mut rec = vec![s.week.to_string(), s.ess.to_string(), s.cum_loglik.to_string()];
        for q in [s.infected, s.compliance, s.transmissibility, s.effective_r] {
            rec.extend([q.mean.to_string(), q.q05.to_string(), q.q95.to_string()]);
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
