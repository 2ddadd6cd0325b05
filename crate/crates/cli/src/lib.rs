//! Batch entry point. Every subcommand reads an optional TOML config, writes
//! its artifacts under `--out`, and stamps each artifact with the config hash
//! and seed.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use epiworld::action::write_actions_csv;
use epiworld::calibrate::{fit, CalibrationConfig, Dataset, FreeParam, Optimizer};
use epiworld::filter::{init_belief, run_filter, summarize, write_summary_csv, FilterConfig};
use epiworld::observation::{read_observations_csv, write_observations_csv};
use epiworld::optimize::{cem_plan, policy_rollout, write_run_log, CemConfig, ClosedLoop};
use epiworld::rng::purpose;
use epiworld::rollout::{
    aggregate_metrics, fan_chart, rollout, rollout_samples, write_fan_csv, RolloutResult, RolloutStart,
};
use epiworld::scenarios::{
    config_hash, ingest_oxcgrt, run_case_backfill, run_case_counterfactual, run_case_misreporting, run_policy_eval,
    trajectory_rows, write_metrics_csv, write_plot_csv, write_trajectory_csv, MetricRow, PolicyEvalConfig,
};
use epiworld::{Error, Execution, Plan, RewardSpec, RngStream, ScenarioConfig, WorldModel};

#[derive(Debug, Parser)]
#[command(
    name = "epiworld",
    version,
    about = "Epidemic world model: simulate, filter, calibrate, plan and run case studies"
)]
pub struct Cli {
    /// TOML config; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Expectation dynamics instead of chain-binomial draws.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaseName {
    Misreporting,
    Backfill,
    Counterfactual,
    PolicyEval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the configured schedule or policy on the true world.
    Simulate,
    /// Track the belief over simulated or supplied observations.
    Filter {
        /// Observation CSV; simulated from the config when omitted.
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Fit free parameters to simulated or supplied observations.
    Calibrate {
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Cross-entropy planning from the prior belief.
    Plan,
    /// Run a case study.
    Case {
        #[arg(long, value_enum)]
        name: CaseName,
    },
    /// Convert an OxCGRT-style CSV into action sequences.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub free: Vec<FreeParam>,
    pub optimizer: Optimizer,
    pub restarts: usize,
    pub particles: usize,
    pub max_evals: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        CalibrateSection {
            free: c.free,
            optimizer: c.optimizer,
            restarts: c.restarts,
            particles: c.particles,
            max_evals: c.max_evals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub horizon: usize,
    pub cem: CemConfig,
    pub reward: RewardSpec,
    /// Rollouts behind the fan chart of the chosen plan.
    pub fan_samples: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection { horizon: 6, cem: CemConfig::default(), reward: RewardSpec::default(), fan_samples: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub scenario: ScenarioConfig,
    pub calibration: CalibrateSection,
    pub plan: PlanSection,
    pub policy_eval: PolicyEvalConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError { kind: kind.into(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new("model", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

/// Provenance stamped onto every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

struct Output {
    dir: PathBuf,
    prov: Provenance,
    config: CliConfig,
    written: Vec<PathBuf>,
}

impl Output {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn header(&self) -> String {
        match self.prov.seed {
            Some(s) => format!("# config_hash={} seed={s}\n", self.prov.config_hash),
            None => format!("# config_hash={}\n", self.prov.config_hash),
        }
    }

    fn csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> epiworld::Result<()>,
    {
        let mut buf = self.header().into_bytes();
        body(&mut buf)?;
        fs::write(self.path(name), buf)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, result: &T) -> Result<(), CliError> {
        let doc = serde_json::json!({
            "config_hash": self.prov.config_hash,
            "seed": self.prov.seed,
            "config": self.config,
            "result": result,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::new("io", e.to_string()))?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn jsonl<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> epiworld::Result<()>,
    {
        let mut buf = Vec::new();
        writeln!(buf, "{}", serde_json::json!({ "config_hash": self.prov.config_hash, "seed": self.prov.seed }))?;
        body(&mut buf)?;
        fs::write(self.path(name), buf)?;
        Ok(())
    }
}

fn require_seed(seed: Option<u64>, cmd: &str) -> Result<u64, CliError> {
    seed.ok_or_else(|| CliError::new("usage", format!("{cmd} is stochastic and needs --seed")))
}

/// Caps the global rayon pool when `EPIWORLD_THREADS` is set.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("EPIWORLD_THREADS") {
        let n: usize =
            v.parse().map_err(|_| CliError::new("usage", format!("EPIWORLD_THREADS={v:?} is not a count")))?;
        if n == 0 {
            return Err(CliError::new("usage", "EPIWORLD_THREADS must be positive"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn truth_world(s: &ScenarioConfig) -> WorldModel {
    WorldModel { params: s.truth_params.clone().unwrap_or_else(|| s.params.clone()), ..s.world() }
}

/// The true trajectory: closed loop when a policy is configured, otherwise the schedule.
fn simulate_truth(s: &ScenarioConfig, seed: u64) -> Result<RolloutResult, CliError> {
    let world = truth_world(s);
    let x0 = s.initial.to_state(world.params.hosp_lag);
    let root = RngStream::new(seed);
    Ok(match &s.policy {
        Some(policy) => {
            let cl = ClosedLoop { policy, start_week: 0, horizon: s.horizon, vaccination: &s.vaccination };
            policy_rollout(
                RolloutStart::State(&x0),
                &cl,
                &world,
                root.child(purpose::TRUTH),
                root.child(purpose::POLICY),
            )?
            .result
        }
        None => rollout(RolloutStart::State(&x0), &s.plan()?, &world, root.child(purpose::TRUTH))?,
    })
}

fn dataset(s: &ScenarioConfig, seed: u64, observations: Option<&Path>) -> Result<Dataset, CliError> {
    match observations {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
            let observations = read_observations_csv(file)?;
            Ok(Dataset { actions: s.schedule(observations.len())?, observations })
        }
        None => {
            let r = simulate_truth(s, seed)?;
            Ok(Dataset { actions: r.actions, observations: r.observations })
        }
    }
}

fn metric_rows(case: &str, label: &str, pairs: &[(&str, String)]) -> Vec<MetricRow> {
    pairs
        .iter()
        .map(|(k, v)| MetricRow { case: case.into(), label: label.into(), metric: (*k).into(), value: v.clone() })
        .collect()
}

fn weeks(w: Option<u32>) -> String {
    w.map(|v| v.to_string()).unwrap_or_else(|| "never".into())
}

/// Runs one invocation; returns the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut config = CliConfig::load(cli.config.as_deref())?;
    if cli.deterministic {
        config.scenario = config.scenario.with_deterministic(true);
        config.policy_eval.synthetic.base.deterministic = true;
    }
    if let (Command::Case { .. }, Some(seed)) = (&cli.command, cli.seed) {
        config.scenario.seeds = (0..5).map(|i| seed.wrapping_add(i)).collect();
    }
    if let Command::Serve { addr } = cli.command {
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(epiworld_service::serve(addr))?;
        return Ok(vec![]);
    }
    config.scenario.validate()?;
    fs::create_dir_all(&cli.out)?;
    let prov = Provenance { config_hash: config_hash(&config), seed: cli.seed };
    let mut out = Output { dir: cli.out.clone(), prov, config: config.clone(), written: vec![] };
    let s = &config.scenario;

    match cli.command {
        Command::Simulate => {
            let seed = require_seed(cli.seed, "simulate")?;
            let r = simulate_truth(s, seed)?;
            let rows = trajectory_rows("truth", &r, &truth_world(s).params)?;
            out.csv("trajectory.csv", |w| write_trajectory_csv(&rows, w))?;
            out.csv("observations.csv", |w| write_observations_csv(&r.observations, w))?;
            out.json("metrics.json", &r.metrics)?;
        }
        Command::Filter { observations } => {
            let seed = require_seed(cli.seed, "filter")?;
            let data = dataset(s, seed, observations.as_deref())?;
            let root = RngStream::new(seed);
            let fc = FilterConfig { particles: s.particles, density: s.density, ..Default::default() };
            let bel0 = init_belief(&s.prior, s.particles, root.child(purpose::PRIOR))?;
            let beliefs = run_filter(
                bel0,
                &data.actions,
                &data.observations,
                &s.params,
                &s.regime,
                &fc,
                root.child(purpose::RESAMPLE),
            )?;
            let summaries: Vec<_> = beliefs.iter().map(|b| summarize(b, &s.params)).collect();
            out.csv("belief_summary.csv", |w| write_summary_csv(&summaries, w))?;
            out.json(
                "filter.json",
                &serde_json::json!({
                    "cum_loglik": beliefs.last().map(|b| b.cum_loglik),
                    "final": summaries.last(),
                }),
            )?;
        }
        Command::Calibrate { observations } => {
            let seed = require_seed(cli.seed, "calibrate")?;
            let data = dataset(s, seed, observations.as_deref())?;
            let c = &config.calibration;
            let cc = CalibrationConfig {
                free: c.free.clone(),
                optimizer: c.optimizer,
                restarts: c.restarts,
                particles: c.particles,
                max_evals: c.max_evals,
                base_params: s.params.clone(),
                regime: s.regime,
                prior: s.prior.clone(),
                density: s.density,
                ..Default::default()
            };
            let report = fit(&data, &cc, seed)?;
            out.json("fit.json", &report)?;
        }
        Command::Plan => {
            let seed = require_seed(cli.seed, "plan")?;
            let p = &config.plan;
            let root = RngStream::new(seed);
            let belief = init_belief(&s.prior, s.particles, root.child(purpose::PRIOR))?;
            let start = RolloutStart::Belief(&belief);
            let r = cem_plan(start, 0, p.horizon, &p.cem, &p.reward, &s.world(), seed)?;
            let samples = rollout_samples(
                start,
                &Plan::new(r.actions.clone()),
                &s.world(),
                p.fan_samples,
                root.child(purpose::POLICY),
                Execution::default(),
            )?;
            let fan = fan_chart(&samples);
            out.json(
                "plan.json",
                &serde_json::json!({
                    "actions": r.actions,
                    "score": r.score,
                    "feasible": r.feasible,
                    "trace": r.trace,
                    "metrics": aggregate_metrics(&samples),
                }),
            )?;
            out.jsonl("run_log.jsonl", |w| write_run_log(&r.log, w))?;
            out.csv("fan.csv", |w| write_fan_csv(&fan, w))?;
            out.csv("actions.csv", |w| write_actions_csv(&r.actions, w))?;
        }
        Command::Case { name } => match name {
            CaseName::Misreporting => {
                let r = run_case_misreporting(s)?;
                let mut rows = Vec::new();
                for seed in &r.seeds {
                    let label = format!("seed={}", seed.seed);
                    rows.extend(metric_rows(
                        "misreporting",
                        &label,
                        &[
                            ("weeks_none", weeks(seed.none)),
                            ("weeks_mixed", weeks(seed.mixed)),
                            ("weeks_pure", weeks(seed.pure)),
                            ("ordered", seed.ordered.to_string()),
                            ("strict", seed.strict.to_string()),
                        ],
                    ));
                }
                out.csv("table.csv", |w| write_metrics_csv(&rows, w))?;
                out.csv("plot.csv", |w| write_plot_csv(&r.plot, w))?;
                out.json(
                    "verdict.json",
                    &serde_json::json!({
                        "deterministic": r.deterministic,
                        "seeds": r.seeds,
                        "pass_rate": r.pass_rate,
                        "verdict": r.verdict,
                    }),
                )?;
            }
            CaseName::Backfill => {
                let seed = s.seeds[0];
                let r = run_case_backfill(s, &s.backfill.profiles, s.backfill.tol, seed)?;
                let mut rows = Vec::new();
                for p in &r.profiles {
                    rows.extend(metric_rows(
                        "backfill",
                        &p.profile,
                        &[
                            ("max_lag", p.max_lag.to_string()),
                            ("median_stabilization", p.median_stabilization.to_string()),
                        ],
                    ));
                }
                out.csv("table.csv", |w| write_metrics_csv(&rows, w))?;
                out.csv("plot.csv", |w| write_plot_csv(&r.plot, w))?;
                let fast_below_slow = match (r.profile("fast"), r.profile("slow")) {
                    (Some(f), Some(sl)) => Some(f.median_stabilization < sl.median_stabilization),
                    _ => None,
                };
                out.json(
                    "verdict.json",
                    &serde_json::json!({
                        "tol": r.tol,
                        "profiles": r.profiles,
                        "fast_below_slow": fast_below_slow,
                    }),
                )?;
            }
            CaseName::Counterfactual => {
                let seed = s.seeds[0];
                let r = run_case_counterfactual(s, seed)?;
                let world = s.counterfactual_world();
                let mut traj = trajectory_rows("baseline", &r.baseline, &world.params)?;
                traj.extend(trajectory_rows("counterfactual", &r.counterfactual, &world.params)?);
                let mut rows = Vec::new();
                for (label, m) in [("baseline", &r.baseline.metrics), ("counterfactual", &r.counterfactual.metrics)] {
                    rows.extend(metric_rows(
                        "counterfactual",
                        label,
                        &[
                            ("peak_hosp_per_100k", m.peak_hosp_per_100k.to_string()),
                            ("peak_week", m.peak_week.to_string()),
                            ("cumulative_infections", m.cumulative_infections.to_string()),
                            ("end_hosp_per_100k", m.end_hosp_per_100k.to_string()),
                        ],
                    ));
                }
                out.csv("table.csv", |w| write_metrics_csv(&rows, w))?;
                out.csv("trajectory.csv", |w| write_trajectory_csv(&traj, w))?;
                out.csv("plot.csv", |w| write_plot_csv(&r.plot(), w))?;
                out.json("verdict.json", &r.verdict)?;
            }
            CaseName::PolicyEval => {
                let seed = require_seed(cli.seed, "case policy-eval")?;
                let r = run_policy_eval(&config.policy_eval, seed)?;
                let mut rows = Vec::new();
                for row in &r.rows {
                    rows.extend(metric_rows(
                        "policy-eval",
                        &format!("{}/{}", row.policy, row.region),
                        &[
                            ("alignment", row.alignment.to_string()),
                            (
                                "hosp_reduction",
                                row.hosp_reduction.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into()),
                            ),
                        ],
                    ));
                }
                out.csv("table.csv", |w| write_metrics_csv(&rows, w))?;
                out.json("verdict.json", &r.summary)?;
            }
        },
        Command::Ingest { input } => {
            let file = fs::File::open(&input).map_err(|e| CliError::new("io", format!("{}: {e}", input.display())))?;
            let r = ingest_oxcgrt(file)?;
            for w in &r.warnings {
                log::warn!("{w}");
            }
            out.json("actions.json", &r.regions)?;
            out.json("gaps.json", &serde_json::json!({ "gaps": r.gaps, "warnings": r.warnings }))?;
        }
        Command::Serve { .. } => unreachable!(),
    }
    Ok(out.written)
}
