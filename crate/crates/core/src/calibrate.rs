//! Likelihood-based calibration of model parameters.
//!
//! The objective is the particle filter's log-likelihood estimate of the
//! observed series under candidate parameters. With the bootstrap proposal
//! this is the filter's evidence bound, so `beta_kl` is carried in config for
//! completeness but only the bootstrap case is implemented. Every candidate
//! is evaluated under the same random streams so the Monte Carlo surface is
//! smooth in the parameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filter::{init_belief, run_filter, FilterConfig, ObservationDensity, PriorConfig};
use crate::observation::{MisreportingRegime, Observation};
use crate::params::ModelParams;
use crate::rng::RngStream;

/// Paired series: `observations[t]` was observed after `actions[t]` was applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub actions: Vec<Action>,
    pub observations: Vec<Observation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Grid resolution along this axis (grid optimizer only).
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_grid_points() -> usize {
    25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Grid,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub free: Vec<FreeParam>,
    pub optimizer: Optimizer,
    pub restarts: usize,
    pub particles: usize,
    /// KL weight of the sequential objective; only 1 (bootstrap bound) is implemented.
    pub beta_kl: f64,
    /// Objective evaluations per Nelder-Mead restart.
    pub max_evals: usize,
    pub base_params: ModelParams,
    pub regime: MisreportingRegime,
    pub prior: PriorConfig,
    pub density: ObservationDensity,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            free: vec![FreeParam { name: "beta0".into(), lower: 0.8, upper: 2.0, grid_points: 25 }],
            optimizer: Optimizer::Grid,
            restarts: 1,
            particles: 200,
            beta_kl: 1.0,
            max_evals: 120,
            base_params: ModelParams::default(),
            regime: MisreportingRegime::none(),
            prior: PriorConfig::default(),
            density: ObservationDensity::default(),
            execution: Execution::default(),
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::InvalidConfig("no free parameters".into()));
        }
        for p in &self.free {
            if self.base_params.get(&p.name).is_none() {
                return Err(Error::InvalidConfig(format!("unknown free parameter {:?}", p.name)));
            }
            if !(p.lower.is_finite() && p.upper.is_finite()) || p.lower > p.upper {
                return Err(Error::InvalidConfig(format!("bounds of {:?} must be finite with lower <= upper", p.name)));
            }
            if p.grid_points == 0 {
                return Err(Error::InvalidConfig(format!("{:?} needs at least one grid point", p.name)));
            }
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if self.particles == 0 {
            return Err(Error::InvalidConfig("particles must be >= 1".into()));
        }
        if self.beta_kl != 1.0 {
            log::warn!("beta_kl = {} ignored: bootstrap bound uses weight 1", self.beta_kl);
        }
        self.prior.validate()?;
        self.base_params.validate()
    }

    fn params_at(&self, theta: &[f64]) -> Result<ModelParams> {
        if theta.len() != self.free.len() {
            return Err(Error::LengthMismatch { left: theta.len(), right: self.free.len() });
        }
        let mut params = self.base_params.clone();
        for (p, &v) in self.free.iter().zip(theta) {
            if !(v >= p.lower && v <= p.upper) {
                return Err(Error::InvalidParams(format!("{} = {v} outside [{}, {}]", p.name, p.lower, p.upper)));
            }
            params.set(&p.name, v)?;
        }
        params.validate()?;
        Ok(params)
    }
}

/// Filter log-likelihood of `data` at `theta` (ordered as `config.free`).
/// An observation the model cannot produce yields `-inf`.
pub fn objective(data: &Dataset, theta: &[f64], config: &CalibrationConfig, seed: u64) -> Result<f64> {
    let params = config.params_at(theta)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let root = RngStream::new(seed);
    let initial = init_belief(&config.prior, config.particles, root.child(0))?;
    let filter = FilterConfig { particles: config.particles, density: config.density, settings: Default::default() };
    match run_filter(initial, &data.actions, &data.observations, &params, &config.regime, &filter, root.child(1)) {
        Ok(beliefs) => Ok(beliefs.last().map(|b| b.cum_loglik).unwrap_or(0.0)),
        Err(Error::ObservationImpossible) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub restart: usize,
    pub theta: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub theta: BTreeMap<String, f64>,
    pub theta_vec: Vec<f64>,
    pub value: f64,
    pub trace: Vec<TraceEntry>,
    pub config: CalibrationConfig,
    pub seed: u64,
}

fn grid_points(config: &CalibrationConfig) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = config
        .free
        .iter()
        .map(|p| {
            if p.grid_points == 1 || p.lower == p.upper {
                vec![p.lower]
            } else {
                let n = p.grid_points;
                (0..n).map(|i| p.lower + (p.upper - p.lower) * i as f64 / (n - 1) as f64).collect()
            }
        })
        .collect();
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Maximizes the objective over the free parameters.
pub fn fit(data: &Dataset, config: &CalibrationConfig, seed: u64) -> Result<FitReport> {
    config.validate()?;
    let trace = match config.optimizer {
        Optimizer::Grid => {
            let points = grid_points(config);
            let values = config.execution.map_slice(&points, |_, theta| objective(data, theta, config, seed));
            points
                .into_iter()
                .zip(values)
                .map(|(theta, v)| Ok(TraceEntry { restart: 0, theta, value: v? }))
                .collect::<Result<Vec<_>>>()?
        }
        Optimizer::NelderMead => {
            let runs = config.execution.map_indexed(config.restarts, |r| nelder_mead_restart(data, config, seed, r));
            let mut trace = Vec::new();
            for run in runs {
                trace.extend(run?);
            }
            trace
        }
    };
    let best = trace
        .iter()
        .filter(|e| e.value > f64::NEG_INFINITY)
        .fold(None::<&TraceEntry>, |best, e| match best {
            Some(b) if b.value >= e.value => Some(b),
            _ => Some(e),
        })
        .ok_or(Error::AllEvaluationsFailed)?;
    let theta = config.free.iter().zip(&best.theta).map(|(p, &v)| (p.name.clone(), v)).collect();
    Ok(FitReport {
        theta,
        theta_vec: best.theta.clone(),
        value: best.value,
        trace: trace.clone(),
        config: config.clone(),
        seed,
    })
}

fn nelder_mead_restart(
    data: &Dataset,
    config: &CalibrationConfig,
    seed: u64,
    restart: usize,
) -> Result<Vec<TraceEntry>> {
    let lower: Vec<f64> = config.free.iter().map(|p| p.lower).collect();
    let upper: Vec<f64> = config.free.iter().map(|p| p.upper).collect();
    let start: Vec<f64> = if restart == 0 {
        lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect()
    } else {
        let mut rng = RngStream::new(seed).keyed(&[0x4E4D, restart as u64]).rng();
        lower.iter().zip(&upper).map(|(&l, &u)| l + (u - l) * rng.random::<f64>()).collect()
    };
    let mut trace = Vec::new();
    let mut err = None;
    let mut eval = |theta: &[f64]| -> f64 {
        match objective(data, theta, config, seed) {
            Ok(v) => {
                trace.push(TraceEntry { restart, theta: theta.to_vec(), value: v });
                v
            }
            Err(e) => {
                err.get_or_insert(e);
                f64::NEG_INFINITY
            }
        }
    };
    nelder_mead_max(&mut eval, &start, &lower, &upper, config.max_evals);
    match err {
        Some(e) => Err(e),
        None => Ok(trace),
    }
}

/// Bounded Nelder-Mead maximization; points are clamped into the box.
/// Returns the best point found.
pub fn nelder_mead_max<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.iter().enumerate().map(|(i, v)| v.clamp(lower[i], upper[i])).collect() };
    // minimize the negated objective; -inf maps to +inf cost
    let mut evals = 0;
    let mut cost = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let x0 = clamp(start.to_vec());
    let c0 = cost(&x0, &mut evals);
    simplex.push((x0.clone(), c0));
    for i in 0..n {
        let width = upper[i] - lower[i];
        if width == 0.0 {
            continue;
        }
        let mut x = x0.clone();
        let step = 0.1 * width;
        x[i] = if x[i] + step <= upper[i] { x[i] + step } else { x[i] - step };
        let c = cost(&x, &mut evals);
        simplex.push((x, c));
    }
    if simplex.len() == 1 {
        return (x0, -c0);
    }
    let dim = simplex.len() - 1;

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .enumerate()
                    .map(|(j, (a, b))| (a - b).abs() / (upper[j] - lower[j]).max(1e-300))
            })
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) && best.is_finite() && size < 1e-6 {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            clamp(centroid.iter().zip(&simplex[dim].0).map(|(c, w)| c + t * (c - w)).collect())
        };
        let xr = along(1.0);
        let cr = cost(&xr, &mut evals);
        if cr < simplex[0].1 {
            let xe = along(2.0);
            let ce = cost(&xe, &mut evals);
            simplex[dim] = if ce < cr { (xe, ce) } else { (xr, cr) };
        } else if cr < simplex[dim - 1].1 {
            simplex[dim] = (xr, cr);
        } else {
            let (xc, cc) = if cr < worst {
                let xc = along(0.5);
                let cc = cost(&xc, &mut evals);
                (xc, cc)
            } else {
                let xc = along(-0.5);
                let cc = cost(&xc, &mut evals);
                (xc, cc)
            };
            if cc < worst.min(cr) {
                simplex[dim] = (xc, cc);
            } else {
                let x_best = simplex[0].0.clone();
                for k in 1..=dim {
                    let xs: Vec<f64> = x_best.iter().zip(&simplex[k].0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let cs = cost(&xs, &mut evals);
                    simplex[k] = (xs, cs);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, c) = simplex.swap_remove(0);
    (x, -c)
}
