//! Policies mapping an information state to interventions, and the two
//! evaluation metrics (action alignment and hospitalization reduction).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, MAX_LEVEL, NUM_DIMS};
use crate::dynamics::effective_r;
use crate::error::{Error, Result};
use crate::filter::BeliefSummary;
use crate::params::ModelParams;
use crate::rng::RngStream;
use crate::state::LatentState;

pub const NUM_LEVELS: usize = MAX_LEVEL as usize + 1;
/// Bias, infected (percent), effective R, reported compliance.
pub const NUM_FEATURES: usize = 4;

/// What a policy gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyInfo {
    pub mean_infected: f64,
    pub mean_effective_r: f64,
    pub survey_compliance: f64,
}

impl PolicyInfo {
    pub fn from_summary(summary: &BeliefSummary, survey_compliance: f64) -> Self {
        PolicyInfo {
            mean_infected: summary.infected.mean,
            mean_effective_r: summary.effective_r.mean,
            survey_compliance,
        }
    }

    /// Perfect-information view of a single latent state.
    pub fn from_state(x: &LatentState, params: &ModelParams, survey_compliance: f64) -> Self {
        PolicyInfo {
            mean_infected: x.epi.i,
            mean_effective_r: effective_r(x, params).unwrap_or(0.0),
            survey_compliance,
        }
    }

    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [1.0, 100.0 * self.mean_infected, self.mean_effective_r, self.survey_compliance]
    }

    pub fn feature(&self, f: Feature) -> f64 {
        match f {
            Feature::MeanInfected => self.mean_infected,
            Feature::MeanEffectiveR => self.mean_effective_r,
            Feature::SurveyCompliance => self.survey_compliance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    MeanInfected,
    MeanEffectiveR,
    SurveyCompliance,
}

impl Feature {
    /// The direction in which this feature signals a worse epidemic. Rules
    /// must fire in that direction so more need never means less control.
    pub fn alarm(self) -> Direction {
        match self {
            Feature::MeanInfected | Feature::MeanEffectiveR => Direction::Above,
            Feature::SurveyCompliance => Direction::Below,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Above,
    Below,
}

/// Raise `dims` to at least `level` when `feature` is above/below `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub feature: Feature,
    pub direction: Direction,
    pub tau: f64,
    pub dims: Vec<usize>,
    pub level: u8,
}

impl ThresholdRule {
    pub fn fires(&self, info: &PolicyInfo) -> bool {
        let v = info.feature(self.feature);
        match self.direction {
            Direction::Above => v > self.tau,
            Direction::Below => v < self.tau,
        }
    }
}

/// Per-dim, per-level linear logits over [`PolicyInfo::features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    /// `weights[dim][level][feature]`.
    pub weights: Vec<Vec<[f64; NUM_FEATURES]>>,
    pub temperature: f64,
}

impl SoftmaxPolicy {
    pub fn zeros(temperature: f64) -> Self {
        SoftmaxPolicy { weights: vec![vec![[0.0; NUM_FEATURES]; NUM_LEVELS]; NUM_DIMS], temperature }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != NUM_DIMS || self.weights.iter().any(|d| d.len() != NUM_LEVELS) {
            return Err(Error::InvalidConfig("softmax weights must be 13 x 5 x 4".into()));
        }
        if self.weights.iter().flatten().flatten().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("softmax weights must be finite".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("softmax temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn logits(&self, dim: usize, features: &[f64; NUM_FEATURES]) -> [f64; NUM_LEVELS] {
        let mut out = [0.0; NUM_LEVELS];
        for (l, w) in self.weights[dim].iter().enumerate() {
            out[l] = w.iter().zip(features).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn probabilities(&self, dim: usize, features: &[f64; NUM_FEATURES]) -> [f64; NUM_LEVELS] {
        let z = self.logits(dim, features).map(|v| v / self.temperature);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v - max).exp());
        let total: f64 = e.iter().sum();
        e.map(|v| v / total)
    }

    /// `log pi(action | features)`, summed over dims.
    pub fn log_prob(&self, features: &[f64; NUM_FEATURES], action: &Action) -> f64 {
        (0..NUM_DIMS).map(|d| self.probabilities(d, features)[action.level(d) as usize].ln()).sum()
    }

    /// Adds `scale * d log pi(action | features) / d weights` into `grad`.
    pub fn accumulate_grad_log_prob(
        &self,
        features: &[f64; NUM_FEATURES],
        action: &Action,
        scale: f64,
        grad: &mut [Vec<[f64; NUM_FEATURES]>],
    ) {
        for (d, gd) in grad.iter_mut().enumerate().take(NUM_DIMS) {
            let p = self.probabilities(d, features);
            let chosen = action.level(d) as usize;
            for (l, gl) in gd.iter_mut().enumerate() {
                let indicator = if l == chosen { 1.0 } else { 0.0 };
                let coef = scale * (indicator - p[l]) / self.temperature;
                for (g, f) in gl.iter_mut().zip(features) {
                    *g += coef * f;
                }
            }
        }
    }

    pub fn sample(&self, features: &[f64; NUM_FEATURES], week: u32, rng: &mut impl Rng) -> Action {
        let mut dims = [0u8; NUM_DIMS];
        for (d, slot) in dims.iter_mut().enumerate() {
            let p = self.probabilities(d, features);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut level = NUM_LEVELS - 1;
            for (l, pl) in p.iter().enumerate() {
                acc += pl;
                if u < acc {
                    level = l;
                    break;
                }
            }
            *slot = level as u8;
        }
        Action::new(week, dims).expect("levels in range")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Fixed action table indexed by week.
    Replay {
        table: Vec<Action>,
    },
    /// Deterministic trigger rules over a base action.
    Threshold {
        #[serde(default = "zero_base")]
        base: Action,
        rules: Vec<ThresholdRule>,
    },
    Softmax(SoftmaxPolicy),
}

fn zero_base() -> Action {
    Action::zeros(0)
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Replay { .. } => Ok(()),
            PolicySpec::Threshold { rules, .. } => {
                for r in rules {
                    if !r.tau.is_finite() {
                        return Err(Error::InvalidConfig("threshold tau must be finite".into()));
                    }
                    if r.level > MAX_LEVEL || r.dims.iter().any(|&d| d >= NUM_DIMS) {
                        return Err(Error::InvalidConfig("threshold rule dim or level out of range".into()));
                    }
                    if r.direction != r.feature.alarm() {
                        return Err(Error::InvalidConfig(format!(
                            "threshold rule on {:?} must fire {:?}",
                            r.feature,
                            r.feature.alarm()
                        )));
                    }
                }
                Ok(())
            }
            PolicySpec::Softmax(s) => s.validate(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Replay { .. } => "replay",
            PolicySpec::Threshold { .. } => "threshold",
            PolicySpec::Softmax(_) => "softmax",
        }
    }
}

/// Proposes the action for `week` given `info`.
pub fn propose(spec: &PolicySpec, info: &PolicyInfo, week: u32, rng: RngStream) -> Result<Action> {
    match spec {
        PolicySpec::Replay { table } => table
            .get(week as usize)
            .map(|a| a.with_week(week))
            .ok_or(Error::HorizonExceedsTable { week: week as usize, len: table.len() }),
        PolicySpec::Threshold { base, rules } => {
            let mut a = base.with_week(week);
            for r in rules.iter().filter(|r| r.fires(info)) {
                for &d in &r.dims {
                    if a.level(d) < r.level {
                        a = a.with_level(d, r.level);
                    }
                }
            }
            Ok(a)
        }
        PolicySpec::Softmax(s) => Ok(s.sample(&info.features(), week, &mut rng.rng())),
    }
}

/// Percentage of (week, dim) cells where the ordinal levels match exactly.
pub fn alignment(proposed: &[Action], realized: &[Action]) -> Result<f64> {
    if proposed.len() != realized.len() {
        return Err(Error::LengthMismatch { left: proposed.len(), right: realized.len() });
    }
    if proposed.is_empty() {
        return Err(Error::Empty("action sequences"));
    }
    let matches: usize =
        proposed.iter().zip(realized).map(|(p, r)| p.dims().iter().zip(r.dims()).filter(|(a, b)| a == b).count()).sum();
    Ok(100.0 * matches as f64 / (proposed.len() * NUM_DIMS) as f64)
}

/// `100 * (start - end) / start` of one hospitalization series.
pub fn hosp_reduction(series: &[f64]) -> Result<f64> {
    let (Some(&start), Some(&end)) = (series.first(), series.last()) else {
        return Err(Error::Empty("hospitalization series"));
    };
    if start == 0.0 {
        return Err(Error::UndefinedReduction);
    }
    Ok(100.0 * (start - end) / start)
}

/// Mean of per-series reductions (one series per region).
pub fn mean_hosp_reduction(series: &[Vec<f64>]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty("region set"));
    }
    let rs = series.iter().map(|s| hosp_reduction(s)).collect::<Result<Vec<_>>>()?;
    Ok(rs.iter().sum::<f64>() / rs.len() as f64)
}

/// Reduction of the region-averaged series.
pub fn pooled_hosp_reduction(series: &[Vec<f64>]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty("region set"));
    }
    let n = series.len() as f64;
    let start = series.iter().map(|s| s.first().copied().unwrap_or(0.0)).sum::<f64>() / n;
    let end = series.iter().map(|s| s.last().copied().unwrap_or(0.0)).sum::<f64>() / n;
    hosp_reduction(&[start, end])
}
