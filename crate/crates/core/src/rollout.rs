//! Counterfactual rollouts.
//!
//! A rollout simulates latent futures and the surveillance signals they would
//! generate under a candidate action sequence. Rollouts are open loop: the
//! action sequence is fixed up front and beliefs are not re-filtered within
//! the horizon. Random streams are keyed by relative week, so two plans that
//! agree up to some week draw identical numbers up to that week.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::action::{Action, RawAction};
use crate::dynamics::{apply_vaccination, step};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filter::{weighted_quantile, Belief};
use crate::observation::{observe, MisreportingRegime, Observation, PER_100K};
use crate::params::ModelParams;
use crate::rng::{purpose, RngStream};
use crate::state::LatentState;

const SELECT_KEY: u64 = 1 << 63 | purpose::SELECT;

/// Everything a rollout needs besides the start and the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModel {
    pub params: ModelParams,
    pub regime: MisreportingRegime,
    /// Hospital occupancy per 100k above which a week counts as an ICU violation.
    pub icu_capacity_per_100k: f64,
}

impl Default for WorldModel {
    fn default() -> Self {
        WorldModel { params: ModelParams::default(), regime: MisreportingRegime::none(), icu_capacity_per_100k: 30.0 }
    }
}

/// Action sequence plus an optional per-week S->R vaccination schedule
/// (fractions of the population; missing weeks mean no vaccination).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Action>,
    #[serde(default)]
    pub vaccination: Vec<f64>,
}

impl Plan {
    pub fn new(actions: Vec<Action>) -> Self {
        Plan { actions, vaccination: Vec::new() }
    }

    /// Validates wire-format actions, failing on the first invalid week.
    pub fn from_raw(actions: Vec<RawAction>, vaccination: Vec<f64>) -> Result<Self> {
        let actions = actions.into_iter().map(Action::try_from).collect::<Result<Vec<_>>>()?;
        if vaccination.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("vaccination fractions must lie in [0, 1]".into()));
        }
        Ok(Plan { actions, vaccination })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn vaccination_at(&self, week: usize) -> f64 {
        self.vaccination.get(week).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutStart<'a> {
    State(&'a LatentState),
    Belief(&'a Belief),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    /// Fraction of the population infected over the horizon.
    pub cumulative_infections: f64,
    /// Peak weekly hospital admissions per 100k (latent).
    pub peak_hosp_per_100k: f64,
    /// 1-based week of the first peak; 0 for an empty horizon.
    pub peak_week: u32,
    pub icu_violation_weeks: u32,
    pub end_hosp_per_100k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub states: Vec<LatentState>,
    pub observations: Vec<Observation>,
    pub metrics: OutcomeMetrics,
    pub actions: Vec<Action>,
    pub rng: RngStream,
    /// Particle drawn from the belief, when started from one.
    pub start_particle: Option<usize>,
}

impl RolloutResult {
    /// Latent weekly admissions per 100k.
    pub fn hosp_series(&self) -> Vec<f64> {
        self.states.iter().map(|x| x.epi.hosp_admissions * PER_100K).collect()
    }
}

pub fn metrics_of(states: &[LatentState], icu_capacity_per_100k: f64) -> OutcomeMetrics {
    if states.is_empty() {
        return OutcomeMetrics::default();
    }
    let hosp: Vec<f64> = states.iter().map(|x| x.epi.hosp_admissions * PER_100K).collect();
    let (peak_idx, peak) = hosp
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    OutcomeMetrics {
        cumulative_infections: states.iter().map(|x| x.epi.new_infections).sum(),
        peak_hosp_per_100k: peak,
        peak_week: peak_idx as u32 + 1,
        icu_violation_weeks: states.iter().filter(|x| x.epi.hosp * PER_100K > icu_capacity_per_100k).count() as u32,
        end_hosp_per_100k: *hosp.last().unwrap(),
    }
}

impl RolloutStart<'_> {
    /// The concrete starting state; a belief start draws one particle.
    pub fn resolve(&self, rng: RngStream) -> (LatentState, Option<usize>) {
        match self {
            RolloutStart::State(x) => ((*x).clone(), None),
            RolloutStart::Belief(bel) => {
                let i = bel.sample_index(&mut rng.child(SELECT_KEY).rng());
                (bel.particles[i].clone(), Some(i))
            }
        }
    }
}

/// Simulates `plan` forward from `start`.
pub fn rollout(start: RolloutStart<'_>, plan: &Plan, world: &WorldModel, rng: RngStream) -> Result<RolloutResult> {
    world.params.validate()?;
    let (mut x, start_particle) = start.resolve(rng);
    let h = plan.horizon();
    let mut states = Vec::with_capacity(h);
    let mut observations = Vec::with_capacity(h);
    for (w, a) in plan.actions.iter().enumerate() {
        let week_rng = rng.child(w as u64);
        x = step(&x, a, &world.params, week_rng.child(purpose::DYNAMICS))?;
        x = apply_vaccination(&x, plan.vaccination_at(w));
        observations.push(observe(&x, a, &world.regime, &world.params, week_rng.child(purpose::OBSERVE)));
        states.push(x.clone());
    }
    Ok(RolloutResult {
        metrics: metrics_of(&states, world.icu_capacity_per_100k),
        states,
        observations,
        actions: plan.actions.clone(),
        rng,
        start_particle,
    })
}

/// `k` independent rollouts of the same plan; sample `i` uses `rng.child(i)`.
pub fn rollout_samples(
    start: RolloutStart<'_>,
    plan: &Plan,
    world: &WorldModel,
    k: usize,
    rng: RngStream,
    execution: Execution,
) -> Result<Vec<RolloutResult>> {
    execution.map_indexed(k, |i| rollout(start, plan, world, rng.child(i as u64))).into_iter().collect()
}

/// Paired rollouts under common random numbers. Both plans must agree on
/// every week before `divergence_week`; the results are then bit-identical
/// on those weeks.
pub fn counterfactual_compare(
    start: RolloutStart<'_>,
    baseline: &Plan,
    alternative: &Plan,
    divergence_week: usize,
    world: &WorldModel,
    seed: u64,
) -> Result<(RolloutResult, RolloutResult)> {
    let prefix = divergence_week.min(baseline.horizon().max(alternative.horizon()));
    for w in 0..prefix {
        let same_action = baseline.actions.get(w) == alternative.actions.get(w);
        let same_vax = baseline.vaccination_at(w) == alternative.vaccination_at(w);
        if !same_action || !same_vax {
            return Err(Error::PrefixMismatch { week: divergence_week });
        }
    }
    let rng = RngStream::new(seed);
    Ok((rollout(start, baseline, world, rng)?, rollout(start, alternative, world, rng)?))
}

/// Scalarization of [`OutcomeMetrics`]; higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub cumulative_infections: f64,
    pub peak_hosp_per_100k: f64,
    pub icu_violation_weeks: f64,
    /// Terminal term; the default reward is `-end_hosp_per_100k`.
    pub end_hosp_per_100k: f64,
    /// Candidates with ICU violations rank below every feasible candidate.
    pub icu_hard_constraint: bool,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            cumulative_infections: 0.0,
            peak_hosp_per_100k: 0.0,
            icu_violation_weeks: 0.0,
            end_hosp_per_100k: -1.0,
            icu_hard_constraint: true,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cumulative_infections, self.peak_hosp_per_100k, self.icu_violation_weeks, self.end_hosp_per_100k];
        if w.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("reward weights must be finite".into()))
        }
    }

    pub fn score(&self, m: &OutcomeMetrics) -> f64 {
        self.cumulative_infections * m.cumulative_infections
            + self.peak_hosp_per_100k * m.peak_hosp_per_100k
            + self.icu_violation_weeks * m.icu_violation_weeks as f64
            + self.end_hosp_per_100k * m.end_hosp_per_100k
    }

    pub fn feasible(&self, m: &OutcomeMetrics) -> bool {
        !self.icu_hard_constraint || m.icu_violation_weeks == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    /// 1-based.
    pub rank: usize,
    pub score: f64,
    pub feasible: bool,
}

/// Ranks candidates: feasible before infeasible, then by score, then by index.
pub fn evaluate(metrics: &[OutcomeMetrics], reward: &RewardSpec) -> Result<Vec<RankedCandidate>> {
    let scored: Vec<(f64, bool)> = metrics.iter().map(|m| (reward.score(m), reward.feasible(m))).collect();
    rank(&scored)
}

/// Ranking over precomputed `(score, feasible)` pairs.
pub fn rank(scored: &[(f64, bool)]) -> Result<Vec<RankedCandidate>> {
    if scored.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let mut ranked: Vec<RankedCandidate> = scored
        .iter()
        .enumerate()
        .map(|(index, &(score, feasible))| RankedCandidate { index, rank: 0, score, feasible })
        .collect();
    ranked.sort_by(|a, b| b.feasible.cmp(&a.feasible).then(b.score.total_cmp(&a.score)).then(a.index.cmp(&b.index)));
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ranked)
}

/// Summary of several sampled rollouts of one candidate. Continuous fields
/// are means, `peak_week` is the median, and `icu_violation_weeks` is the
/// mean rounded up so that any violating sample marks the candidate.
pub fn aggregate_metrics(results: &[RolloutResult]) -> OutcomeMetrics {
    if results.is_empty() {
        return OutcomeMetrics::default();
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&OutcomeMetrics) -> f64| results.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let mut weeks: Vec<u32> = results.iter().map(|r| r.metrics.peak_week).collect();
    weeks.sort_unstable();
    OutcomeMetrics {
        cumulative_infections: mean(&|m| m.cumulative_infections),
        peak_hosp_per_100k: mean(&|m| m.peak_hosp_per_100k),
        peak_week: weeks[(weeks.len() - 1) / 2],
        icu_violation_weeks: mean(&|m| m.icu_violation_weeks as f64).ceil() as u32,
        end_hosp_per_100k: mean(&|m| m.end_hosp_per_100k),
    }
}

pub const FAN_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanRow {
    pub week: u32,
    pub series: String,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Per-week quantiles across samples for the latent and observed series.
pub fn fan_chart(results: &[RolloutResult]) -> Vec<FanRow> {
    let Some(first) = results.first() else { return Vec::new() };
    let h = first.states.len();
    type Series = (&'static str, fn(&RolloutResult, usize) -> f64);
    let series: [Series; 4] = [
        ("latent_hosp_per_100k", |r, w| r.states[w].epi.hosp_admissions * PER_100K),
        ("hosp_per_100k", |r, w| r.observations[w].hosp_per_100k),
        ("reported_cases_per_100k", |r, w| r.observations[w].reported_cases_per_100k),
        ("infected", |r, w| r.states[w].epi.i),
    ];
    let weights = vec![1.0; results.len()];
    let mut rows = Vec::with_capacity(h * series.len());
    for (name, get) in series {
        for w in 0..h {
            let vals: Vec<f64> = results.iter().map(|r| get(r, w)).collect();
            let q: Vec<f64> = FAN_QUANTILES.iter().map(|&q| weighted_quantile(&vals, &weights, q)).collect();
            rows.push(FanRow {
                week: first.observations[w].week,
                series: name.to_string(),
                q05: q[0],
                q25: q[1],
                q50: q[2],
                q75: q[3],
                q95: q[4],
            });
        }
    }
    rows
}

pub fn write_fan_csv<W: Write>(rows: &[FanRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
