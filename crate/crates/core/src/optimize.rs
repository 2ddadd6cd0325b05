//! Policy improvement against the world model: cross-entropy planning over
//! action sequences, group-relative policy gradient for softmax policies and
//! a hill-climbing refiner for threshold policies.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, NUM_DIMS};
use crate::dynamics::{apply_vaccination, step};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::observation::{misreport_survey, observe};
use crate::policy::{propose, Direction, PolicyInfo, PolicySpec, SoftmaxPolicy, NUM_FEATURES, NUM_LEVELS};
use crate::rng::{purpose, RngStream};
use crate::rollout::{
    aggregate_metrics, metrics_of, rank, rollout_samples, Plan, RewardSpec, RolloutResult, RolloutStart, WorldModel,
};

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// One line of the optimization run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub iteration: usize,
    pub candidate: usize,
    pub score: f64,
    pub seed: u64,
}

pub fn write_run_log<W: Write>(entries: &[RunLogEntry], mut w: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iters: usize,
    /// Weight on the elite frequencies when refitting; 1 is a pure refit.
    pub smoothing: f64,
    /// Rollouts averaged per candidate.
    pub samples: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig { population: 64, elites: 8, iters: 10, smoothing: 0.5, samples: 8, execution: Execution::default() }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.population >= self.elites && self.elites >= 1) {
            return Err(Error::InvalidConfig("population >= elites >= 1 required".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::InvalidConfig("smoothing must be in (0, 1]".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    pub iteration: usize,
    pub best_score: f64,
    pub iteration_best: f64,
    pub elite_mean: f64,
    pub population_mean: f64,
}

/// `probs[week][dim][level]`.
pub type SequenceDistribution = Vec<[[f64; NUM_LEVELS]; NUM_DIMS]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemResult {
    pub actions: Vec<Action>,
    pub score: f64,
    pub feasible: bool,
    pub trace: Vec<CemIteration>,
    pub distribution: SequenceDistribution,
    pub log: Vec<RunLogEntry>,
}

fn sample_sequence(dist: &SequenceDistribution, start_week: u32, rng: &mut impl Rng) -> Vec<Action> {
    dist.iter()
        .enumerate()
        .map(|(w, cells)| {
            let mut dims = [0u8; NUM_DIMS];
            for (slot, p) in dims.iter_mut().zip(cells) {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                *slot = (NUM_LEVELS - 1) as u8;
                for (l, pl) in p.iter().enumerate() {
                    acc += pl;
                    if u < acc {
                        *slot = l as u8;
                        break;
                    }
                }
            }
            Action::new(start_week + w as u32, dims).expect("levels in range")
        })
        .collect()
}

/// Cross-entropy search over action sequences of length `horizon`.
/// `evaluate_batch` returns `(score, feasible)` per candidate.
pub fn cem_search<F>(
    horizon: usize,
    start_week: u32,
    config: &CemConfig,
    seed: u64,
    mut evaluate_batch: F,
) -> Result<CemResult>
where
    F: FnMut(&[Vec<Action>]) -> Result<Vec<(f64, bool)>>,
{
    config.validate()?;
    let mut dist: SequenceDistribution = vec![[[1.0 / NUM_LEVELS as f64; NUM_LEVELS]; NUM_DIMS]; horizon];
    if horizon == 0 {
        return Ok(CemResult {
            actions: vec![],
            score: 0.0,
            feasible: true,
            trace: vec![],
            distribution: dist,
            log: vec![],
        });
    }
    let root = RngStream::new(seed);
    let mut best: Option<(Vec<Action>, f64, bool)> = None;
    let mut trace = Vec::with_capacity(config.iters);
    let mut log = Vec::new();
    for it in 0..config.iters {
        let candidates: Vec<Vec<Action>> = (0..config.population)
            .map(|j| sample_sequence(&dist, start_week, &mut root.keyed(&[it as u64, j as u64]).rng()))
            .collect();
        let scored = evaluate_batch(&candidates)?;
        if scored.len() != candidates.len() {
            return Err(Error::LengthMismatch { left: candidates.len(), right: scored.len() });
        }
        for (j, &(score, _)) in scored.iter().enumerate() {
            log.push(RunLogEntry { iteration: it, candidate: j, score, seed });
        }
        let ranked = rank(&scored)?;
        let top = ranked[0];
        let improves = match &best {
            None => true,
            Some((_, s, f)) => (top.feasible, top.score) > (*f, *s),
        };
        if improves {
            best = Some((candidates[top.index].clone(), top.score, top.feasible));
        }
        let elites = &ranked[..config.elites];
        let mut freq = vec![[[0.0; NUM_LEVELS]; NUM_DIMS]; horizon];
        for e in elites {
            for (w, a) in candidates[e.index].iter().enumerate() {
                for d in 0..NUM_DIMS {
                    freq[w][d][a.level(d) as usize] += 1.0 / elites.len() as f64;
                }
            }
        }
        for (cells, fcells) in dist.iter_mut().zip(&freq) {
            for (p, f) in cells.iter_mut().zip(fcells) {
                for (pl, fl) in p.iter_mut().zip(f) {
                    *pl = (1.0 - config.smoothing) * *pl + config.smoothing * fl;
                }
                let total: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= total);
            }
        }
        let mean = |rs: &[crate::rollout::RankedCandidate]| rs.iter().map(|r| r.score).sum::<f64>() / rs.len() as f64;
        trace.push(CemIteration {
            iteration: it,
            best_score: best.as_ref().map(|b| b.1).unwrap_or(f64::NEG_INFINITY),
            iteration_best: top.score,
            elite_mean: mean(elites),
            population_mean: mean(&ranked),
        });
    }
    let (actions, score, feasible) = best.ok_or(Error::Empty("CEM iterations"))?;
    Ok(CemResult { actions, score, feasible, trace, distribution: dist, log })
}

/// CEM planning from a state or belief. Every candidate is scored on the same
/// `config.samples` rollout streams, so ranking differences come from the
/// actions alone.
pub fn cem_plan(
    start: RolloutStart<'_>,
    start_week: u32,
    horizon: usize,
    config: &CemConfig,
    reward: &RewardSpec,
    world: &WorldModel,
    seed: u64,
) -> Result<CemResult> {
    reward.validate()?;
    let eval_rng = RngStream::new(seed).child(purpose::DYNAMICS);
    cem_search(horizon, start_week, config, seed, |candidates| {
        config
            .execution
            .map_slice(candidates, |_, actions| {
                let plan = Plan::new(actions.clone());
                let results = rollout_samples(start, &plan, world, config.samples, eval_rng, Execution::Sequential)?;
                let m = aggregate_metrics(&results);
                Ok((reward.score(&m), reward.feasible(&m)))
            })
            .into_iter()
            .collect()
    })
}

/// CEM with one iteration and one elite: pure random shooting.
#[allow(clippy::too_many_arguments)]
pub fn random_shooting(
    start: RolloutStart<'_>,
    start_week: u32,
    horizon: usize,
    population: usize,
    samples: usize,
    reward: &RewardSpec,
    world: &WorldModel,
    seed: u64,
) -> Result<CemResult> {
    let config = CemConfig { population, elites: 1, iters: 1, smoothing: 1.0, samples, ..Default::default() };
    cem_plan(start, start_week, horizon, &config, reward, world, seed)
}

/// A policy driving the world model week by week.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub policy: &'a PolicySpec,
    pub start_week: u32,
    pub horizon: usize,
    pub vaccination: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrajectory {
    pub result: RolloutResult,
    pub infos: Vec<PolicyInfo>,
}

impl PolicyTrajectory {
    pub fn features(&self) -> Vec<[f64; NUM_FEATURES]> {
        self.infos.iter().map(|i| i.features()).collect()
    }
}

/// Closed-loop rollout. The policy sees the true latent state for infection
/// and effective R but only the reported survey compliance. Dynamics and
/// observation noise come from `rng` keyed exactly as in an open-loop
/// rollout; policy sampling uses `policy_rng`.
pub fn policy_rollout(
    start: RolloutStart<'_>,
    cl: &ClosedLoop<'_>,
    world: &WorldModel,
    rng: RngStream,
    policy_rng: RngStream,
) -> Result<PolicyTrajectory> {
    world.params.validate()?;
    cl.policy.validate()?;
    let (mut x, start_particle) = start.resolve(rng);
    let mut survey = misreport_survey(x.beh.b, &world.regime);
    let mut states = Vec::with_capacity(cl.horizon);
    let mut observations = Vec::with_capacity(cl.horizon);
    let mut actions = Vec::with_capacity(cl.horizon);
    let mut infos = Vec::with_capacity(cl.horizon);
    for w in 0..cl.horizon {
        let info = PolicyInfo::from_state(&x, &world.params, survey);
        let week = cl.start_week + w as u32;
        let a = propose(cl.policy, &info, week, policy_rng.child(w as u64).child(purpose::POLICY))?;
        let week_rng = rng.child(w as u64);
        x = step(&x, &a, &world.params, week_rng.child(purpose::DYNAMICS))?;
        x = apply_vaccination(&x, cl.vaccination.get(w).copied().unwrap_or(0.0));
        let o = observe(&x, &a, &world.regime, &world.params, week_rng.child(purpose::OBSERVE));
        survey = o.survey_compliance;
        observations.push(o);
        states.push(x.clone());
        actions.push(a);
        infos.push(info);
    }
    Ok(PolicyTrajectory {
        result: RolloutResult {
            metrics: metrics_of(&states, world.icu_capacity_per_100k),
            states,
            observations,
            actions,
            rng,
            start_particle,
        },
        infos,
    })
}

/// One group member: the features seen, the actions taken and the return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub features: Vec<[f64; NUM_FEATURES]>,
    pub actions: Vec<Action>,
    pub reward: f64,
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (sd + ADVANTAGE_EPS)).collect())
}

/// `sum_i A_i log pi(actions_i)`.
pub fn surrogate(policy: &SoftmaxPolicy, group: &[GroupSample], adv: &[f64]) -> f64 {
    group
        .iter()
        .zip(adv)
        .map(|(g, a)| a * g.features.iter().zip(&g.actions).map(|(f, act)| policy.log_prob(f, act)).sum::<f64>())
        .sum()
}

pub fn surrogate_gradient(policy: &SoftmaxPolicy, group: &[GroupSample], adv: &[f64]) -> Vec<Vec<[f64; NUM_FEATURES]>> {
    let mut grad = vec![vec![[0.0; NUM_FEATURES]; NUM_LEVELS]; NUM_DIMS];
    for (g, a) in group.iter().zip(adv) {
        for (f, act) in g.features.iter().zip(&g.actions) {
            policy.accumulate_grad_log_prob(f, act, *a, &mut grad);
        }
    }
    grad
}

/// One ascent step on the group-relative surrogate.
pub fn grpo_step(spec: &PolicySpec, group: &[GroupSample], learning_rate: f64) -> Result<PolicySpec> {
    let PolicySpec::Softmax(policy) = spec else {
        return Err(Error::InvalidConfig("grpo_step needs a softmax policy".into()));
    };
    policy.validate()?;
    let rewards: Vec<f64> = group.iter().map(|g| g.reward).collect();
    let adv = advantages(&rewards)?;
    let grad = surrogate_gradient(policy, group, &adv);
    let mut next = policy.clone();
    for (wd, gd) in next.weights.iter_mut().zip(&grad) {
        for (wl, gl) in wd.iter_mut().zip(gd) {
            for (w, g) in wl.iter_mut().zip(gl) {
                *w += learning_rate * g;
            }
        }
    }
    Ok(PolicySpec::Softmax(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub horizon: usize,
    pub reward: RewardSpec,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            steps: 200,
            learning_rate: 0.05,
            horizon: 6,
            reward: RewardSpec::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoResult {
    pub spec: PolicySpec,
    pub mean_reward: Vec<f64>,
    pub log: Vec<RunLogEntry>,
}

/// Trains a softmax policy on closed-loop rollouts. Members of a group share
/// dynamics noise and differ only in their policy draws.
pub fn grpo_train(
    spec: &PolicySpec,
    start: RolloutStart<'_>,
    start_week: u32,
    world: &WorldModel,
    config: &GrpoConfig,
    seed: u64,
) -> Result<GrpoResult> {
    config.reward.validate()?;
    let root = RngStream::new(seed);
    let mut spec = spec.clone();
    let mut mean_reward = Vec::with_capacity(config.steps);
    let mut log = Vec::new();
    for s in 0..config.steps {
        let dyn_rng = root.keyed(&[s as u64, purpose::DYNAMICS]);
        let current = &spec;
        let group: Vec<GroupSample> = config
            .execution
            .map_indexed(config.group_size, |i| {
                let cl = ClosedLoop { policy: current, start_week, horizon: config.horizon, vaccination: &[] };
                let t = policy_rollout(start, &cl, world, dyn_rng, root.keyed(&[s as u64, purpose::POLICY, i as u64]))?;
                Ok(GroupSample {
                    features: t.features(),
                    reward: config.reward.score(&t.result.metrics),
                    actions: t.result.actions,
                })
            })
            .into_iter()
            .collect::<Result<_>>()?;
        for (i, g) in group.iter().enumerate() {
            log.push(RunLogEntry { iteration: s, candidate: i, score: g.reward, seed });
        }
        mean_reward.push(group.iter().map(|g| g.reward).sum::<f64>() / group.len() as f64);
        spec = grpo_step(&spec, &group, config.learning_rate)?;
    }
    Ok(GrpoResult { spec, mean_reward, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResult {
    pub spec: PolicySpec,
    pub score: f64,
    pub input_score: f64,
    pub trials: Vec<RunLogEntry>,
}

/// Hill-climbs the thresholds and levels of a threshold policy. `history` is
/// the hospitalization series from the last evaluation: when it ends above
/// where it started, edits that trigger earlier and harder are tried first.
/// At most `rule_budget` trial edits are scored; only strict improvements are
/// kept, so the result never scores below the input.
pub fn iterate_feedback<F>(
    spec: &PolicySpec,
    history: &[f64],
    rule_budget: usize,
    seed: u64,
    mut score: F,
) -> Result<FeedbackResult>
where
    F: FnMut(&PolicySpec) -> Result<f64>,
{
    let (Some(first), Some(last)) = (history.first(), history.last()) else {
        return Err(Error::Empty("evaluation history"));
    };
    let PolicySpec::Threshold { rules, .. } = spec else {
        return Err(Error::InvalidConfig("iterate_feedback needs a threshold policy".into()));
    };
    spec.validate()?;
    let input_score = score(spec)?;
    let mut best = spec.clone();
    let mut best_score = input_score;
    let mut trials = Vec::new();
    if rule_budget == 0 || rules.is_empty() {
        return Ok(FeedbackResult { spec: best, score: best_score, input_score, trials });
    }
    let tighten_first = last > first;
    // (rule, move) with move 0 = earlier trigger, 1 = later, 2 = level up, 3 = level down
    let order: [usize; 4] = if tighten_first { [0, 2, 1, 3] } else { [1, 3, 0, 2] };
    let moves: Vec<(usize, usize)> = order.iter().flat_map(|&m| (0..rules.len()).map(move |r| (r, m))).collect();
    let mut step_scale = 1.0;
    let mut since_accept = 0;
    let mut k = 0;
    while trials.len() < rule_budget {
        let (r, m) = moves[k % moves.len()];
        k += 1;
        let Some(candidate) = edit_rule(&best, r, m, step_scale) else {
            since_accept += 1;
            if since_accept >= moves.len() {
                step_scale *= 0.5;
                since_accept = 0;
            }
            continue;
        };
        let s = score(&candidate)?;
        trials.push(RunLogEntry { iteration: trials.len(), candidate: r * 4 + m, score: s, seed });
        if s > best_score {
            best = candidate;
            best_score = s;
            since_accept = 0;
        } else {
            since_accept += 1;
            if since_accept >= moves.len() {
                step_scale *= 0.5;
                since_accept = 0;
            }
        }
    }
    Ok(FeedbackResult { spec: best, score: best_score, input_score, trials })
}

fn edit_rule(spec: &PolicySpec, r: usize, m: usize, scale: f64) -> Option<PolicySpec> {
    let PolicySpec::Threshold { base, rules } = spec else { return None };
    let mut rules = rules.clone();
    let rule = &mut rules[r];
    let delta = scale * (0.1 * rule.tau.abs()).max(0.01);
    let earlier = match rule.direction {
        Direction::Above => -delta,
        Direction::Below => delta,
    };
    match m {
        0 => rule.tau += earlier,
        1 => rule.tau -= earlier,
        2 if rule.level < crate::action::MAX_LEVEL => rule.level += 1,
        3 if rule.level > 0 => rule.level -= 1,
        _ => return None,
    }
    Some(PolicySpec::Threshold { base: *base, rules })
}
