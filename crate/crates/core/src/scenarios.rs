//! Case-study harness: misreporting, reporting-lag backfill and
//! counterfactual interventions, plus synthetic regions, OxCGRT ingestion and
//! the closed-loop policy evaluation preset.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{Action, RawAction, DEFAULT_DIM_NAMES, MASKING_DIM, MAX_LEVEL, NUM_DIMS, VACCINATION_DIM};
use crate::dynamics::{effective_r, step};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filter::{ObservationDensity, PriorConfig};
use crate::observation::{
    expected_observation, observe, report_as_of, stabilization_time, MisreportingRegime, Observation, RevisionProfile,
    RevisionTriangle,
};
use crate::optimize::{policy_rollout, ClosedLoop};
use crate::params::ModelParams;
use crate::policy::{alignment, hosp_reduction, Direction, Feature, PolicySpec, SoftmaxPolicy, ThresholdRule};
use crate::rng::{purpose, RngStream};
use crate::rollout::{counterfactual_compare, rollout, Plan, RolloutResult, RolloutStart, WorldModel};
use crate::state::LatentState;

/// Initial latent state of the true world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub exposed: f64,
    pub infected: f64,
    pub recovered: f64,
    pub compliance: f64,
    pub transmissibility: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState { exposed: 0.002, infected: 0.004, recovered: 0.0, compliance: 0.0, transmissibility: 1.0 }
    }
}

impl InitialState {
    pub fn to_state(&self, hosp_lag: usize) -> LatentState {
        let mut x = LatentState::seeded(self.exposed, self.infected, hosp_lag);
        x.epi.r = self.recovered;
        x.epi.s -= self.recovered;
        x.beh.b = self.compliance;
        x.reg.m = self.transmissibility;
        x
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.exposed, self.infected, self.recovered, self.compliance];
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) || self.exposed + self.infected + self.recovered > 1.0 {
            return Err(Error::InvalidConfig("initial fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        if !(self.transmissibility > 0.0 && self.transmissibility.is_finite()) {
            return Err(Error::InvalidConfig("initial transmissibility must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisreportingCase {
    pub inflation: f64,
    pub mixed_fraction: f64,
    /// Closed-loop controller; it reacts to reported compliance.
    pub controller: PolicySpec,
}

impl Default for MisreportingCase {
    fn default() -> Self {
        MisreportingCase {
            inflation: 0.3,
            mixed_fraction: 0.5,
            controller: PolicySpec::Threshold {
                base: Action::zeros(0),
                rules: vec![ThresholdRule {
                    feature: Feature::SurveyCompliance,
                    direction: Direction::Below,
                    tau: 0.6,
                    dims: (0..NUM_DIMS).collect(),
                    level: MAX_LEVEL,
                }],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackfillCase {
    pub profiles: Vec<RevisionProfile>,
    pub tol: f64,
    /// Population used to turn per-100k rates into counts.
    pub population: f64,
}

impl Default for BackfillCase {
    fn default() -> Self {
        BackfillCase {
            profiles: vec![RevisionProfile::no_delay(), RevisionProfile::fast(), RevisionProfile::slow()],
            tol: 0.05,
            population: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualCase {
    pub divergence_week: usize,
    pub baseline_vaccination_start: usize,
    /// Clamped to the divergence week so the plans share their prefix.
    pub counterfactual_vaccination_start: usize,
    /// Weekly S to R fraction once vaccination starts.
    pub vaccination_rate: f64,
    pub masking_dims: Vec<usize>,
    pub masking_level: u8,
    /// World for this case; absent means the scenario's params. The
    /// deterministic flag always follows the scenario.
    pub params: Option<ModelParams>,
}

impl Default for CounterfactualCase {
    fn default() -> Self {
        CounterfactualCase {
            divergence_week: 4,
            baseline_vaccination_start: 14,
            counterfactual_vaccination_start: 4,
            vaccination_rate: 0.002,
            masking_dims: vec![MASKING_DIM, VACCINATION_DIM],
            masking_level: MAX_LEVEL,
            // Compliance saturates below the level that halts transmission,
            // so the epidemic turns on susceptible depletion.
            params: Some(ModelParams { kappa: 0.35, lambda_p: 0.25, lambda_r: 0.0, ..ModelParams::default() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub params: ModelParams,
    pub regime: MisreportingRegime,
    pub horizon: usize,
    pub initial: InitialState,
    /// Analyst prior used by belief tracking.
    pub prior: PriorConfig,
    /// Weekly schedule; short schedules repeat their last entry, an empty one means no intervention.
    pub actions: Vec<RawAction>,
    pub policy: Option<PolicySpec>,
    pub vaccination: Vec<f64>,
    pub revision: RevisionProfile,
    pub seeds: Vec<u64>,
    pub icu_capacity_per_100k: f64,
    /// Parameters of the held-out true world when they differ from `params`.
    pub truth_params: Option<ModelParams>,
    pub particles: usize,
    pub density: ObservationDensity,
    pub misreporting: MisreportingCase,
    pub backfill: BackfillCase,
    pub counterfactual: CounterfactualCase,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            params: ModelParams::default(),
            regime: MisreportingRegime::none(),
            horizon: 30,
            initial: InitialState::default(),
            prior: PriorConfig::default(),
            actions: vec![RawAction { week: 0, dims: vec![1; NUM_DIMS] }],
            policy: None,
            vaccination: vec![],
            revision: RevisionProfile::slow(),
            seeds: vec![1, 2, 3, 4, 5],
            icu_capacity_per_100k: 30.0,
            truth_params: None,
            particles: 500,
            density: ObservationDensity::default(),
            misreporting: MisreportingCase::default(),
            backfill: BackfillCase::default(),
            counterfactual: CounterfactualCase::default(),
        }
    }
}

impl ScenarioConfig {
    /// Every action-table violation, as `actions[i]: ...` strings.
    pub fn action_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, raw) in self.actions.iter().enumerate() {
            if raw.week < 0 {
                out.push(format!("actions[{i}]: week {} must be >= 0", raw.week));
            }
            if let Err(vs) = crate::action::validate_action(&raw.dims) {
                out.extend(vs.into_iter().map(|v| format!("actions[{i}]: {v}")));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.action_violations();
        if !violations.is_empty() {
            return Err(Error::InvalidConfig(violations.join("; ")));
        }
        self.params.validate()?;
        if let Some(p) = &self.truth_params {
            p.validate()?;
        }
        self.regime.validate()?;
        self.initial.validate()?;
        self.prior.validate()?;
        self.revision.validate()?;
        if let Some(p) = &self.policy {
            p.validate()?;
        }
        if self.vaccination.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("vaccination fractions must lie in [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.particles == 0 {
            return Err(Error::InvalidConfig("particles must be positive".into()));
        }
        let m = &self.misreporting;
        MisreportingRegime::mixed(m.mixed_fraction, m.inflation).validate()?;
        m.controller.validate()?;
        for p in &self.backfill.profiles {
            p.validate()?;
        }
        if !(self.backfill.tol > 0.0) || !(self.backfill.population > 0.0) {
            return Err(Error::InvalidConfig("backfill tol and population must be positive".into()));
        }
        let c = &self.counterfactual;
        if c.masking_dims.iter().any(|&d| d >= NUM_DIMS) || c.masking_level > MAX_LEVEL {
            return Err(Error::InvalidConfig("counterfactual masking dim or level out of range".into()));
        }
        if !(0.0..=1.0).contains(&c.vaccination_rate) {
            return Err(Error::InvalidConfig("vaccination_rate must lie in [0, 1]".into()));
        }
        if let Some(p) = &c.params {
            p.validate()?;
        }
        Ok(())
    }

    /// The world the counterfactual case runs in.
    pub fn counterfactual_world(&self) -> WorldModel {
        let mut world = self.world();
        if let Some(p) = &self.counterfactual.params {
            world.params = ModelParams { deterministic: self.params.deterministic, ..p.clone() };
        }
        world
    }

    pub fn world(&self) -> WorldModel {
        WorldModel {
            params: self.params.clone(),
            regime: self.regime,
            icu_capacity_per_100k: self.icu_capacity_per_100k,
        }
    }

    pub fn initial_state(&self) -> LatentState {
        self.initial.to_state(self.params.hosp_lag)
    }

    /// The action schedule stretched or cut to `horizon` weeks.
    pub fn schedule(&self, horizon: usize) -> Result<Vec<Action>> {
        let table: Vec<Action> = self.actions.iter().cloned().map(Action::try_from).collect::<Result<_>>()?;
        Ok((0..horizon)
            .map(|w| match table.get(w).or(table.last()) {
                Some(a) => a.with_week(w as u32),
                None => Action::zeros(w as u32),
            })
            .collect())
    }

    pub fn plan(&self) -> Result<Plan> {
        Ok(Plan { actions: self.schedule(self.horizon)?, vaccination: self.vaccination.clone() })
    }

    pub fn with_deterministic(mut self, on: bool) -> Self {
        self.params.deterministic = on;
        if let Some(p) = self.truth_params.as_mut() {
            p.deterministic = on;
        }
        self
    }
}

/// SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// One point of a plot-ready long-format table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub figure: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], w: W) -> Result<()> {
    write_csv_rows(rows, w)
}

fn write_csv_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// First 1-based week whose state has effective R below one.
pub fn weeks_to_r_below_1(states: &[LatentState], params: &ModelParams) -> Result<Option<u32>> {
    for (w, x) in states.iter().enumerate() {
        if effective_r(x, params)? < 1.0 {
            return Ok(Some(w as u32 + 1));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisreportingSeed {
    pub seed: u64,
    pub none: Option<u32>,
    pub mixed: Option<u32>,
    pub pure: Option<u32>,
    /// None <= Mixed <= Pure, with "never" ordered last.
    pub ordered: bool,
    /// Pure strictly later than None.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisreportingReport {
    pub deterministic: bool,
    pub seeds: Vec<MisreportingSeed>,
    pub pass_rate: f64,
    pub verdict: bool,
    pub plot: Vec<PlotRow>,
}

fn weeks_key(w: Option<u32>) -> u64 {
    w.map(u64::from).unwrap_or(u64::MAX)
}

pub fn misreporting_regimes(case: &MisreportingCase) -> [(&'static str, MisreportingRegime); 3] {
    [
        ("none", MisreportingRegime::none()),
        ("mixed", MisreportingRegime::mixed(case.mixed_fraction, case.inflation)),
        ("pure", MisreportingRegime::pure(case.inflation)),
    ]
}

/// Closed-loop run of the controller under one regime.
pub fn run_misreporting_regime(
    base: &ScenarioConfig,
    regime: MisreportingRegime,
    seed: u64,
) -> Result<(Option<u32>, RolloutResult)> {
    let world = WorldModel { regime, ..base.world() };
    let x0 = base.initial_state();
    let cl = ClosedLoop {
        policy: &base.misreporting.controller,
        start_week: 0,
        horizon: base.horizon,
        vaccination: &base.vaccination,
    };
    let root = RngStream::new(seed);
    let t =
        policy_rollout(RolloutStart::State(&x0), &cl, &world, root.child(purpose::TRUTH), root.child(purpose::POLICY))?;
    Ok((weeks_to_r_below_1(&t.result.states, &base.params)?, t.result))
}

/// Weeks until effective R drops below one under each misreporting regime.
/// All regimes share each seed's random streams.
pub fn run_case_misreporting(base: &ScenarioConfig) -> Result<MisreportingReport> {
    base.validate()?;
    let regimes = misreporting_regimes(&base.misreporting);
    let runs: Vec<Vec<(Option<u32>, RolloutResult)>> = Execution::default()
        .map_slice(&base.seeds, |_, &seed| {
            regimes.iter().map(|(_, r)| run_misreporting_regime(base, *r, seed)).collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut seeds = Vec::with_capacity(runs.len());
    for (&seed, r) in base.seeds.iter().zip(&runs) {
        let (none, mixed, pure) = (r[0].0, r[1].0, r[2].0);
        seeds.push(MisreportingSeed {
            seed,
            none,
            mixed,
            pure,
            ordered: weeks_key(none) <= weeks_key(mixed) && weeks_key(mixed) <= weeks_key(pure),
            strict: weeks_key(none) < weeks_key(pure),
        });
    }
    let passed = seeds.iter().filter(|s| s.ordered && s.strict).count();
    let pass_rate = passed as f64 / seeds.len() as f64;
    let deterministic = base.params.deterministic;
    let verdict = if deterministic { passed == seeds.len() } else { pass_rate >= 0.8 };
    let mut plot = Vec::new();
    for ((name, _), (_, result)) in regimes.iter().zip(&runs[0]) {
        for (w, x) in result.states.iter().enumerate() {
            plot.push(PlotRow {
                figure: "misreporting".into(),
                series: format!("effective_r_{name}"),
                x: (w + 1) as f64,
                y: effective_r(x, &base.params)?,
            });
        }
        for (w, o) in result.observations.iter().enumerate() {
            plot.push(PlotRow {
                figure: "misreporting".into(),
                series: format!("survey_compliance_{name}"),
                x: (w + 1) as f64,
                y: o.survey_compliance,
            });
        }
    }
    Ok(MisreportingReport { deterministic, seeds, pass_rate, verdict, plot })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillProfileResult {
    pub profile: String,
    pub max_lag: usize,
    pub stabilization: Vec<usize>,
    pub median_stabilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillReport {
    pub tol: f64,
    pub finals: Vec<u64>,
    pub profiles: Vec<BackfillProfileResult>,
    pub plot: Vec<PlotRow>,
}

impl BackfillReport {
    pub fn profile(&self, name: &str) -> Option<&BackfillProfileResult> {
        self.profiles.iter().find(|p| p.profile == name)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Resting weekly case counts of the scheduled trajectory.
pub fn simulate_case_counts(base: &ScenarioConfig, seed: u64) -> Result<Vec<u64>> {
    let x0 = base.initial_state();
    let r =
        rollout(RolloutStart::State(&x0), &base.plan()?, &base.world(), RngStream::new(seed).child(purpose::TRUTH))?;
    let scale = base.backfill.population / crate::observation::PER_100K;
    Ok(r.observations.iter().map(|o| (o.reported_cases_per_100k * scale).round() as u64).collect())
}

/// Stabilization times of each revision profile applied to the same counts.
pub fn run_case_backfill(
    base: &ScenarioConfig,
    profiles: &[RevisionProfile],
    tol: f64,
    seed: u64,
) -> Result<BackfillReport> {
    if profiles.is_empty() {
        return Err(Error::Empty("revision profiles"));
    }
    base.validate()?;
    let finals = simulate_case_counts(base, seed)?;
    let mut out = Vec::with_capacity(profiles.len());
    let mut plot = Vec::new();
    for p in profiles {
        let tri = RevisionTriangle::from_finals(&finals, p)?;
        let stabilization = (0..tri.weeks()).map(|t| stabilization_time(&tri, t, tol)).collect::<Result<Vec<_>>>()?;
        let as_f: Vec<f64> = stabilization.iter().map(|&s| s as f64).collect();
        // as known at the last week of the series
        let now = tri.weeks().saturating_sub(1);
        for t in 0..tri.weeks() {
            let reported = report_as_of(&tri, t, now)?;
            plot.push(PlotRow {
                figure: "backfill".into(),
                series: format!("reported_{}", p.name),
                x: t as f64,
                y: reported as f64,
            });
        }
        for (k, &c) in p.maturity.iter().enumerate() {
            plot.push(PlotRow { figure: "backfill".into(), series: format!("maturity_{}", p.name), x: k as f64, y: c });
        }
        out.push(BackfillProfileResult {
            profile: p.name.clone(),
            max_lag: p.max_lag(),
            median_stabilization: median(&as_f),
            stabilization,
        });
    }
    for (t, &f) in finals.iter().enumerate() {
        plot.push(PlotRow { figure: "backfill".into(), series: "resting".into(), x: t as f64, y: f as f64 });
    }
    Ok(BackfillReport { tol, finals, profiles: out, plot })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualVerdict {
    pub diverged: bool,
    pub prefix_identical: bool,
    pub baseline_peak: f64,
    pub counterfactual_peak: f64,
    pub baseline_peak_week: u32,
    pub counterfactual_peak_week: u32,
    pub lower_peak: bool,
    pub peak_not_earlier: bool,
    pub verdict: bool,
    pub label: String,
}

/// Compares the alternative against the baseline.
pub fn counterfactual_verdict(
    baseline: &RolloutResult,
    alternative: &RolloutResult,
    divergence_week: usize,
) -> CounterfactualVerdict {
    let prefix = divergence_week.min(baseline.states.len()).min(alternative.states.len());
    let prefix_identical = baseline.states[..prefix] == alternative.states[..prefix]
        && baseline.observations[..prefix] == alternative.observations[..prefix];
    let diverged = baseline.actions != alternative.actions || baseline.states != alternative.states;
    let (b, a) = (&baseline.metrics, &alternative.metrics);
    let lower_peak = a.peak_hosp_per_100k < b.peak_hosp_per_100k;
    let peak_not_earlier = a.peak_week >= b.peak_week;
    let verdict = diverged && lower_peak && peak_not_earlier;
    let label = if !diverged {
        "no divergence"
    } else if verdict {
        "lower and delayed hospitalization peak"
    } else if lower_peak {
        "lower but earlier hospitalization peak"
    } else {
        "no reduction in hospitalization peak"
    };
    CounterfactualVerdict {
        diverged,
        prefix_identical,
        baseline_peak: b.peak_hosp_per_100k,
        counterfactual_peak: a.peak_hosp_per_100k,
        baseline_peak_week: b.peak_week,
        counterfactual_peak_week: a.peak_week,
        lower_peak,
        peak_not_earlier,
        verdict,
        label: label.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualReport {
    pub baseline: RolloutResult,
    pub counterfactual: RolloutResult,
    pub verdict: CounterfactualVerdict,
}

impl CounterfactualReport {
    pub fn plot(&self) -> Vec<PlotRow> {
        let mut rows = Vec::new();
        for (name, r) in [("baseline", &self.baseline), ("counterfactual", &self.counterfactual)] {
            for (w, h) in r.hosp_series().into_iter().enumerate() {
                rows.push(PlotRow {
                    figure: "counterfactual".into(),
                    series: format!("hosp_{name}"),
                    x: (w + 1) as f64,
                    y: h,
                });
            }
        }
        rows
    }
}

/// Baseline plan and the earlier-vaccination, stricter-masking alternative.
pub fn counterfactual_plans(base: &ScenarioConfig) -> Result<(Plan, Plan)> {
    let c = &base.counterfactual;
    let h = base.horizon;
    let actions = base.schedule(h)?;
    let vax = |start: usize| (0..h).map(|w| if w >= start { c.vaccination_rate } else { 0.0 }).collect::<Vec<_>>();
    let baseline = Plan { actions: actions.clone(), vaccination: vax(c.baseline_vaccination_start) };
    let d = c.divergence_week;
    let alt_actions = actions
        .iter()
        .enumerate()
        .map(|(w, a)| {
            if w < d {
                return *a;
            }
            c.masking_dims.iter().fold(*a, |a, &dim| {
                if a.level(dim) < c.masking_level {
                    a.with_level(dim, c.masking_level)
                } else {
                    a
                }
            })
        })
        .collect();
    let alt_start = c.counterfactual_vaccination_start.min(c.baseline_vaccination_start).max(d);
    let mut alt_vax = vax(alt_start);
    for (w, v) in alt_vax.iter_mut().enumerate().take(d.min(h)) {
        *v = baseline.vaccination[w];
    }
    Ok((baseline, Plan { actions: alt_actions, vaccination: alt_vax }))
}

pub fn run_case_counterfactual(base: &ScenarioConfig, seed: u64) -> Result<CounterfactualReport> {
    base.validate()?;
    let (baseline, alternative) = counterfactual_plans(base)?;
    let world = base.counterfactual_world();
    let x0 = base.initial.to_state(world.params.hosp_lag);
    let d = base.counterfactual.divergence_week;
    let (b, a) = counterfactual_compare(RolloutStart::State(&x0), &baseline, &alternative, d, &world, seed)?;
    let verdict = counterfactual_verdict(&b, &a, d);
    Ok(CounterfactualReport { baseline: b, counterfactual: a, verdict })
}

/// Ranges for synthetic region parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub base: ModelParams,
    pub beta0: [f64; 2],
    pub ihr: [f64; 2],
    pub kappa: [f64; 2],
    pub rho0: [f64; 2],
    pub infected: [f64; 2],
    /// Per-week probability that a dim moves one level.
    pub action_volatility: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            base: ModelParams { obs_noise_sd: 0.1, survey_noise_sd: 0.02, ..Default::default() },
            beta0: [1.2, 1.8],
            ihr: [0.01, 0.03],
            kappa: [0.4, 0.8],
            rho0: [0.2, 0.5],
            infected: [0.002, 0.01],
            action_volatility: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegion {
    pub region: String,
    pub params: ModelParams,
    pub initial: LatentState,
    pub actions: Vec<Action>,
    /// `observations[t]` follows `actions[t]`.
    pub observations: Vec<Observation>,
    /// `states[t]` is the latent state after `actions[t]`.
    pub states: Vec<LatentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub regions: Vec<SyntheticRegion>,
}

fn uniform_in(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn gen_synthetic(n_regions: usize, weeks: usize, seed: u64) -> Result<SyntheticDataset> {
    gen_synthetic_with(n_regions, weeks, seed, &SyntheticConfig::default())
}

/// Heterogeneous synthetic regions with ground-truth latents.
pub fn gen_synthetic_with(
    n_regions: usize,
    weeks: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<SyntheticDataset> {
    if n_regions == 0 || weeks == 0 {
        return Err(Error::InvalidConfig("n_regions and weeks must be at least 1".into()));
    }
    cfg.base.validate()?;
    let root = RngStream::new(seed);
    let regions = Execution::default()
        .map_indexed(n_regions, |r| {
            let rs = root.child(r as u64);
            let mut rng = rs.child(purpose::PRIOR).rng();
            let params = ModelParams {
                beta0: uniform_in(&mut rng, cfg.beta0),
                ihr: uniform_in(&mut rng, cfg.ihr),
                kappa: uniform_in(&mut rng, cfg.kappa),
                rho0: uniform_in(&mut rng, cfg.rho0),
                ..cfg.base.clone()
            };
            let infected = uniform_in(&mut rng, cfg.infected);
            let initial = LatentState::seeded(infected / 2.0, infected, params.hosp_lag);
            let mut arng = rs.child(purpose::POLICY).rng();
            let mut levels: [u8; NUM_DIMS] = std::array::from_fn(|_| arng.random_range(0..=2u8));
            let mut actions = Vec::with_capacity(weeks);
            for w in 0..weeks {
                if w > 0 {
                    for l in levels.iter_mut() {
                        if arng.random::<f64>() < cfg.action_volatility {
                            *l = if arng.random::<bool>() { (*l + 1).min(MAX_LEVEL) } else { l.saturating_sub(1) };
                        }
                    }
                }
                actions.push(Action::new(w as u32, levels)?);
            }
            let regime = MisreportingRegime::none();
            let mut x = initial.clone();
            let mut states = Vec::with_capacity(weeks);
            let mut observations = Vec::with_capacity(weeks);
            for (w, a) in actions.iter().enumerate() {
                let wr = rs.child(purpose::TRUTH).child(w as u64);
                x = step(&x, a, &params, wr.child(purpose::DYNAMICS))?;
                observations.push(observe(&x, a, &regime, &params, wr.child(purpose::OBSERVE)));
                states.push(x.clone());
            }
            Ok(SyntheticRegion { region: format!("region_{r:02}"), params, initial, actions, observations, states })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { seed, regions })
}

/// Noise-free observations implied by stored latents.
pub fn regenerate_observations(region: &SyntheticRegion) -> Vec<Observation> {
    region
        .states
        .iter()
        .zip(&region.actions)
        .map(|(x, a)| expected_observation(x, a, &MisreportingRegime::none(), &region.params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionActions {
    pub region: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekGap {
    pub region: String,
    pub missing_weeks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub regions: Vec<RegionActions>,
    pub gaps: Vec<WeekGap>,
    pub warnings: Vec<String>,
}

/// Reads `region,week,<13 indicator columns>` and rescales every indicator
/// column onto 0..=4 by min-max over its observed values. Regions keep
/// their order of first appearance; rows within a region are sorted by week.
pub fn ingest_oxcgrt<R: Read>(input: R) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::MissingHeader);
    }
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut missing = Vec::new();
    let region_col = find("region");
    let week_col = find("week");
    if region_col.is_none() {
        missing.push("region");
    }
    if week_col.is_none() {
        missing.push("week");
    }
    let dim_cols: Vec<Option<usize>> = DEFAULT_DIM_NAMES.iter().map(|n| find(n)).collect();
    for (n, c) in DEFAULT_DIM_NAMES.iter().zip(&dim_cols) {
        if c.is_none() {
            missing.push(n);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing.join(", ")));
    }
    let (region_col, week_col) = (region_col.unwrap(), week_col.unwrap());
    let dim_cols: Vec<usize> = dim_cols.into_iter().map(Option::unwrap).collect();

    let mut warnings = Vec::new();
    let mut rows: Vec<(String, u32, [f64; NUM_DIMS])> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let region = rec.get(region_col).unwrap_or("").to_string();
        if region.is_empty() {
            return Err(Error::Parse { line, message: "empty region".into() });
        }
        let week: u32 = rec
            .get(week_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Parse { line, message: "week must be a non-negative integer".into() })?;
        let mut values = [0.0; NUM_DIMS];
        for (d, &c) in dim_cols.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("");
            values[d] = if cell.is_empty() {
                warnings.push(format!("line {line}: empty {} read as 0", DEFAULT_DIM_NAMES[d]));
                0.0
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("{} = {cell:?} is not a number", DEFAULT_DIM_NAMES[d]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, message: format!("{} is not finite", DEFAULT_DIM_NAMES[d]) });
                }
                if v < 0.0 {
                    warnings.push(format!("line {line}: negative {} = {v} clamped to 0", DEFAULT_DIM_NAMES[d]));
                    0.0
                } else {
                    v
                }
            };
        }
        rows.push((region, week, values));
    }

    let mut lo = [f64::INFINITY; NUM_DIMS];
    let mut hi = [f64::NEG_INFINITY; NUM_DIMS];
    for (_, _, v) in &rows {
        for d in 0..NUM_DIMS {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    for d in 0..NUM_DIMS {
        if !rows.is_empty() && lo[d] == hi[d] && lo[d] > MAX_LEVEL as f64 {
            warnings.push(format!("constant {} = {} clamped to 4", DEFAULT_DIM_NAMES[d], lo[d]));
        }
    }
    let level = |d: usize, v: f64| -> u8 {
        if hi[d] > lo[d] {
            (MAX_LEVEL as f64 * (v - lo[d]) / (hi[d] - lo[d])).round() as u8
        } else {
            v.round().clamp(0.0, MAX_LEVEL as f64) as u8
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut by_region: BTreeMap<String, BTreeMap<u32, [u8; NUM_DIMS]>> = BTreeMap::new();
    for (region, week, v) in &rows {
        if !by_region.contains_key(region) {
            order.push(region.clone());
        }
        let levels: [u8; NUM_DIMS] = std::array::from_fn(|d| level(d, v[d]));
        if by_region.entry(region.clone()).or_default().insert(*week, levels).is_some() {
            warnings.push(format!("region {region} week {week} repeated; last row kept"));
        }
    }
    let mut regions = Vec::with_capacity(order.len());
    let mut gaps = Vec::new();
    for region in order {
        let weeks = &by_region[&region];
        let (first, last) = (*weeks.keys().next().unwrap(), *weeks.keys().next_back().unwrap());
        let missing_weeks: Vec<u32> = (first..=last).filter(|w| !weeks.contains_key(w)).collect();
        if !missing_weeks.is_empty() {
            gaps.push(WeekGap { region: region.clone(), missing_weeks });
        }
        let actions = weeks.iter().map(|(&w, &dims)| Action::new(w, dims)).collect::<Result<Vec<_>>>()?;
        regions.push(RegionActions { region, actions });
    }
    Ok(IngestReport { regions, gaps, warnings })
}

/// Closed-loop evaluation over synthetic regions: each policy drives every
/// region for `horizon` weeks from the state at `weeks - horizon`, and is
/// scored by alignment with the realized actions and by hospitalization
/// reduction over the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyEvalConfig {
    pub n_regions: usize,
    pub weeks: usize,
    pub horizon: usize,
    pub synthetic: SyntheticConfig,
    /// Extra policies; the realized-action replay always runs first.
    pub policies: Vec<(String, PolicySpec)>,
}

impl Default for PolicyEvalConfig {
    fn default() -> Self {
        PolicyEvalConfig {
            n_regions: 10,
            weeks: 20,
            horizon: 6,
            synthetic: SyntheticConfig::default(),
            policies: vec![
                (
                    "threshold".into(),
                    PolicySpec::Threshold {
                        base: Action::uniform(0, 1),
                        rules: vec![ThresholdRule {
                            feature: Feature::MeanEffectiveR,
                            direction: Direction::Above,
                            tau: 1.0,
                            dims: (0..NUM_DIMS).collect(),
                            level: 3,
                        }],
                    },
                ),
                ("softmax".into(), PolicySpec::Softmax(SoftmaxPolicy::zeros(1.0))),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalRow {
    pub policy: String,
    pub region: String,
    pub alignment: f64,
    pub hosp_start: f64,
    pub hosp_end: f64,
    pub hosp_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalSummary {
    pub policy: String,
    pub mean_alignment: f64,
    /// Mean of per-region reductions over regions where it is defined.
    pub mean_hosp_reduction: Option<f64>,
    /// Reduction of the region-averaged start and end values.
    pub pooled_hosp_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalReport {
    pub rows: Vec<PolicyEvalRow>,
    pub summary: Vec<PolicyEvalSummary>,
}

pub fn run_policy_eval(cfg: &PolicyEvalConfig, seed: u64) -> Result<PolicyEvalReport> {
    if cfg.horizon == 0 || cfg.horizon >= cfg.weeks {
        return Err(Error::InvalidConfig("policy-eval needs 0 < horizon < weeks".into()));
    }
    let data = gen_synthetic_with(cfg.n_regions, cfg.weeks, seed, &cfg.synthetic)?;
    let t0 = cfg.weeks - cfg.horizon;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let realized_name = "realized".to_string();
    let policies: Vec<(String, Option<&PolicySpec>)> =
        std::iter::once((realized_name, None)).chain(cfg.policies.iter().map(|(n, p)| (n.clone(), Some(p)))).collect();
    for (pi, (name, spec)) in policies.iter().enumerate() {
        let per_region = Execution::default()
            .map_slice(&data.regions, |r, region| {
                let realized = &region.actions[t0..];
                let replay = PolicySpec::Replay { table: region.actions.clone() };
                let policy = spec.unwrap_or(&replay);
                let world = WorldModel { params: region.params.clone(), ..Default::default() };
                let cl = ClosedLoop { policy, start_week: t0 as u32, horizon: cfg.horizon, vaccination: &[] };
                let start = &region.states[t0 - 1];
                let rs = RngStream::new(seed).keyed(&[0xE7A1, r as u64]);
                let t = policy_rollout(RolloutStart::State(start), &cl, &world, rs, rs.keyed(&[pi as u64]))?;
                let hosp = t.result.hosp_series();
                Ok(PolicyEvalRow {
                    policy: name.clone(),
                    region: region.region.clone(),
                    alignment: alignment(&t.result.actions, realized)?,
                    hosp_start: hosp[0],
                    hosp_end: *hosp.last().unwrap(),
                    hosp_reduction: hosp_reduction(&hosp).ok(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let n = per_region.len() as f64;
        let defined: Vec<f64> = per_region.iter().filter_map(|r| r.hosp_reduction).collect();
        let start = per_region.iter().map(|r| r.hosp_start).sum::<f64>() / n;
        let end = per_region.iter().map(|r| r.hosp_end).sum::<f64>() / n;
        summary.push(PolicyEvalSummary {
            policy: name.clone(),
            mean_alignment: per_region.iter().map(|r| r.alignment).sum::<f64>() / n,
            mean_hosp_reduction: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            pooled_hosp_reduction: hosp_reduction(&[start, end]).ok(),
        });
        rows.extend(per_region);
    }
    Ok(PolicyEvalReport { rows, summary })
}

/// One row of a flat metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case: String,
    pub label: String,
    pub metric: String,
    pub value: String,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    write_csv_rows(rows, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub label: String,
    pub week: u32,
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub r: f64,
    pub hosp: f64,
    pub new_infections: f64,
    pub hosp_admissions: f64,
    pub compliance: f64,
    pub fatigue: f64,
    pub transmissibility: f64,
    pub effective_r: f64,
    pub reported_cases_per_100k: f64,
    pub hosp_per_100k: f64,
    pub survey_compliance: f64,
}

pub fn trajectory_rows(label: &str, result: &RolloutResult, params: &ModelParams) -> Result<Vec<TrajectoryRow>> {
    result
        .states
        .iter()
        .zip(&result.observations)
        .map(|(x, o)| {
            Ok(TrajectoryRow {
                label: label.to_string(),
                week: o.week,
                s: x.epi.s,
                e: x.epi.e,
                i: x.epi.i,
                r: x.epi.r,
                hosp: x.epi.hosp,
                new_infections: x.epi.new_infections,
                hosp_admissions: x.epi.hosp_admissions,
                compliance: x.beh.b,
                fatigue: x.beh.f,
                transmissibility: x.reg.m,
                effective_r: effective_r(x, params)?,
                reported_cases_per_100k: o.reported_cases_per_100k,
                hosp_per_100k: o.hosp_per_100k,
                survey_compliance: o.survey_compliance,
            })
        })
        .collect()
}

pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], w: W) -> Result<()> {
    write_csv_rows(rows, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> ScenarioConfig {
        ScenarioConfig::default().with_deterministic(true)
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(config_hash(&back), config_hash(&c));
        assert_ne!(config_hash(&c), config_hash(&det()));
    }

    #[test]
    fn invalid_actions_are_listed() {
        let c = ScenarioConfig {
            actions: vec![RawAction { week: 0, dims: vec![9; NUM_DIMS] }, RawAction { week: 1, dims: vec![0; 3] }],
            ..Default::default()
        };
        let v = c.action_violations();
        assert_eq!(v.len(), NUM_DIMS + 1);
        assert!(v[0].starts_with("actions[0]"));
        assert!(c.validate().is_err());
    }

    #[test]
    fn misreporting_ordering_deterministic() {
        let r = run_case_misreporting(&det()).unwrap();
        for s in &r.seeds {
            assert!(s.ordered && s.strict, "{s:?}");
        }
        assert!(r.verdict);
    }

    #[test]
    fn misreporting_degenerate_regimes() {
        let base = det();
        let none = run_misreporting_regime(&base, MisreportingRegime::none(), 1).unwrap();
        let mixed0 = run_misreporting_regime(&base, MisreportingRegime::mixed(0.0, 0.3), 1).unwrap();
        assert_eq!(none.0, mixed0.0);
        let mut zero = det();
        zero.misreporting.inflation = 0.0;
        let r = run_case_misreporting(&zero).unwrap();
        for s in &r.seeds {
            assert!(s.none == s.mixed && s.mixed == s.pure);
        }
    }

    #[test]
    fn backfill_fast_beats_slow() {
        let c = ScenarioConfig::default();
        let r = run_case_backfill(&c, &c.backfill.profiles, 0.05, 3).unwrap();
        assert!(r.profile("none").unwrap().stabilization.iter().all(|&s| s == 0));
        assert!(r.profile("fast").unwrap().median_stabilization < r.profile("slow").unwrap().median_stabilization);
        let vacuous = run_case_backfill(&c, &c.backfill.profiles, 1.0, 3).unwrap();
        assert!(vacuous.profiles.iter().all(|p| p.stabilization.iter().all(|&s| s == 0)));
    }

    #[test]
    fn counterfactual_default_verdict() {
        let r = run_case_counterfactual(&det(), 1).unwrap();
        assert!(r.verdict.prefix_identical);
        assert!(r.verdict.verdict, "{:?}", r.verdict);
        let swapped = counterfactual_verdict(&r.counterfactual, &r.baseline, 4);
        assert!(!swapped.verdict && !swapped.lower_peak);
    }

    #[test]
    fn counterfactual_past_horizon_does_not_diverge() {
        let mut c = det();
        c.counterfactual.divergence_week = c.horizon + 5;
        let r = run_case_counterfactual(&c, 1).unwrap();
        assert_eq!(r.baseline.states, r.counterfactual.states);
        assert_eq!(r.verdict.label, "no divergence");
        assert!(!r.verdict.verdict);
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let d = gen_synthetic(1, 1, 5).unwrap();
        assert_eq!(d.regions.len(), 1);
        assert_eq!((d.regions[0].actions.len(), d.regions[0].observations.len()), (1, 1));
        assert_eq!(gen_synthetic(3, 8, 5).unwrap(), gen_synthetic(3, 8, 5).unwrap());
        assert!(gen_synthetic(0, 3, 5).is_err());
    }

    #[test]
    fn synthetic_noise_free_round_trip() {
        let cfg = SyntheticConfig { base: ModelParams::default(), ..Default::default() };
        let d = gen_synthetic_with(2, 10, 8, &cfg).unwrap();
        for r in &d.regions {
            assert_eq!(regenerate_observations(r), r.observations);
        }
    }

    #[test]
    fn ingest_examples() {
        assert!(matches!(ingest_oxcgrt("".as_bytes()), Err(Error::MissingHeader)));
        assert!(matches!(ingest_oxcgrt("region,week\nA,0\n".as_bytes()), Err(Error::MissingColumns(_))));
        let header = format!("region,week,{}", DEFAULT_DIM_NAMES.join(","));
        let mut text = header.clone() + "\n";
        for region in ["A", "B"] {
            for w in 0..3 {
                let mut v = vec!["1".to_string(); NUM_DIMS];
                v[0] = w.to_string();
                v[1] = (w * 2).to_string();
                text += &format!("{region},{w},{}\n", v.join(","));
            }
        }
        let r = ingest_oxcgrt(text.as_bytes()).unwrap();
        assert_eq!(r.regions.len(), 2);
        assert!(r.regions.iter().all(|g| g.actions.len() == 3));
        let col0: Vec<u8> = r.regions[0].actions.iter().map(|a| a.level(0)).collect();
        assert_eq!(col0, vec![0, 2, 4]);
        assert!(r.gaps.is_empty());
    }

    #[test]
    fn ingest_reports_gaps() {
        let header = format!("region,week,{}", DEFAULT_DIM_NAMES.join(","));
        let row = |w: u32| format!("A,{w},{}\n", vec!["0"; NUM_DIMS].join(","));
        let text = format!("{header}\n{}{}", row(0), row(3));
        let r = ingest_oxcgrt(text.as_bytes()).unwrap();
        assert_eq!(r.gaps, vec![WeekGap { region: "A".into(), missing_weeks: vec![1, 2] }]);
    }

    #[test]
    fn policy_eval_replay_aligns_fully() {
        let cfg = PolicyEvalConfig { n_regions: 3, weeks: 10, ..Default::default() };
        let r = run_policy_eval(&cfg, 2).unwrap();
        assert_eq!(r.summary[0].policy, "realized");
        assert_eq!(r.summary[0].mean_alignment, 100.0);
        assert_eq!(r.summary.len(), 3);
        assert_eq!(r, run_policy_eval(&cfg, 2).unwrap());
    }
}
