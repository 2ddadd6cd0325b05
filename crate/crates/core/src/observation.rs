//! Policy-dependent observation layer.
//!
//! Three channels are produced from a latent state: reported cases (scaled by
//! an ascertainment rate that depends on the previous week's testing level),
//! lagged hospital admissions, and a self-reported compliance survey that may
//! be inflated by strategic over-reporting. Reported cases are additionally
//! subject to backfill, modeled by a [`RevisionTriangle`].

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::action::{Action, MAX_LEVEL};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::RngStream;
use crate::state::LatentState;

pub const PER_100K: f64 = 100_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub week: u32,
    pub reported_cases_per_100k: f64,
    pub hosp_per_100k: f64,
    pub survey_compliance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisreportingTag {
    None,
    Mixed,
    Pure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisreportingRegime {
    pub tag: MisreportingTag,
    pub over_report_fraction: f64,
    pub inflation: f64,
}

impl Default for MisreportingRegime {
    fn default() -> Self {
        Self::none()
    }
}

impl MisreportingRegime {
    pub fn none() -> Self {
        MisreportingRegime { tag: MisreportingTag::None, over_report_fraction: 0.0, inflation: 0.0 }
    }

    pub fn mixed(over_report_fraction: f64, inflation: f64) -> Self {
        MisreportingRegime { tag: MisreportingTag::Mixed, over_report_fraction, inflation }
    }

    pub fn pure(inflation: f64) -> Self {
        MisreportingRegime { tag: MisreportingTag::Pure, over_report_fraction: 1.0, inflation }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = self.over_report_fraction;
        if !(0.0..=1.0).contains(&fr) || !(0.0..=1.0).contains(&self.inflation) {
            return Err(Error::InvalidConfig("misreporting fraction and inflation must lie in [0, 1]".into()));
        }
        let consistent = match self.tag {
            MisreportingTag::None => fr == 0.0,
            MisreportingTag::Pure => fr == 1.0,
            MisreportingTag::Mixed => true,
        };
        if consistent {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("over_report_fraction {fr} inconsistent with regime {:?}", self.tag)))
        }
    }
}

/// Reported compliance: `(1 - fr) * b + fr * min(1, b + delta)`.
pub fn misreport_survey(b: f64, regime: &MisreportingRegime) -> f64 {
    if regime.tag == MisreportingTag::None {
        return b;
    }
    let fr = regime.over_report_fraction;
    (1.0 - fr) * b + fr * (b + regime.inflation).min(1.0)
}

/// Ascertainment rate given the previous week's action.
pub fn ascertainment(a_prev: &Action, params: &ModelParams) -> f64 {
    let testing = a_prev.level(params.testing_dim) as f64 / MAX_LEVEL as f64;
    (params.rho0 * (1.0 + params.testing_gain * testing)).clamp(0.0, 1.0)
}

/// Noise-free channel means for `x`, i.e. what [`observe`] returns with zero noise.
pub fn expected_observation(
    x: &LatentState,
    a_prev: &Action,
    regime: &MisreportingRegime,
    params: &ModelParams,
) -> Observation {
    Observation {
        week: a_prev.week() + 1,
        reported_cases_per_100k: x.epi.new_infections * ascertainment(a_prev, params) * PER_100K,
        hosp_per_100k: x.epi.hosp_admissions * PER_100K,
        survey_compliance: misreport_survey(x.beh.b, regime),
    }
}

/// Samples an observation of `x` taken after `a_prev` was applied.
pub fn observe(
    x: &LatentState,
    a_prev: &Action,
    regime: &MisreportingRegime,
    params: &ModelParams,
    rng: RngStream,
) -> Observation {
    let mut o = expected_observation(x, a_prev, regime, params);
    if params.obs_noise_sd == 0.0 && params.survey_noise_sd == 0.0 {
        return o;
    }
    let mut rng = rng.rng();
    if params.obs_noise_sd > 0.0 {
        let zc: f64 = StandardNormal.sample(&mut rng);
        let zh: f64 = StandardNormal.sample(&mut rng);
        o.reported_cases_per_100k *= (params.obs_noise_sd * zc).exp();
        o.hosp_per_100k *= (params.obs_noise_sd * zh).exp();
    }
    if params.survey_noise_sd > 0.0 {
        o.survey_compliance = sample_truncated_unit(o.survey_compliance, params.survey_noise_sd, &mut rng);
    }
    o
}

/// Normal(mean, sd) truncated to [0, 1], by rejection.
fn sample_truncated_unit(mean: f64, sd: f64, rng: &mut impl Rng) -> f64 {
    for _ in 0..1000 {
        let z: f64 = StandardNormal.sample(rng);
        let v = mean + sd * z;
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    mean.clamp(0.0, 1.0)
}

/// Fraction of the resting count known at each reporting lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionProfile {
    pub name: String,
    pub maturity: Vec<f64>,
}

impl RevisionProfile {
    pub fn new(name: impl Into<String>, maturity: Vec<f64>) -> Result<Self> {
        let p = RevisionProfile { name: name.into(), maturity };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.maturity;
        if c.is_empty() {
            return Err(Error::InvalidConfig(format!("profile {:?} is empty", self.name)));
        }
        if c.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidConfig(format!("profile {:?} entries must lie in (0, 1]", self.name)));
        }
        if c.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(format!("profile {:?} must be non-decreasing", self.name)));
        }
        if *c.last().unwrap() != 1.0 {
            return Err(Error::InvalidConfig(format!("profile {:?} must end at 1", self.name)));
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.maturity.len() - 1
    }

    /// Reports are complete on arrival.
    pub fn no_delay() -> Self {
        RevisionProfile { name: "none".into(), maturity: vec![1.0] }
    }

    /// Illustrative preset for a surveillance system that settles within two weeks.
    pub fn fast() -> Self {
        RevisionProfile { name: "fast".into(), maturity: vec![0.85, 0.97, 1.0] }
    }

    /// Illustrative preset for a system that keeps revising for six weeks.
    pub fn slow() -> Self {
        RevisionProfile { name: "slow".into(), maturity: vec![0.3, 0.55, 0.75, 0.88, 0.95, 0.99, 1.0] }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::no_delay()),
            "fast" => Some(Self::fast()),
            "slow" => Some(Self::slow()),
            _ => None,
        }
    }
}

/// `counts[t][k]`: cases for event week `t` as reported at lag `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionTriangle {
    counts: Vec<Vec<u64>>,
    max_lag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangleRow {
    pub event_week: usize,
    pub lag: usize,
    pub count: u64,
}

impl RevisionTriangle {
    /// Noise-free triangle: `r[t][k] = round(final[t] * c[k])`.
    pub fn from_finals(finals: &[u64], profile: &RevisionProfile) -> Result<Self> {
        profile.validate()?;
        let counts =
            finals.iter().map(|&f| profile.maturity.iter().map(|&c| (f as f64 * c).round() as u64).collect()).collect();
        Ok(RevisionTriangle { counts, max_lag: profile.max_lag() })
    }

    /// Builds a triangle from long-format rows. Every event week needs lags 0..=K_max.
    pub fn from_rows(rows: &[TriangleRow]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(RevisionTriangle { counts: Vec::new(), max_lag: 0 });
        }
        let weeks = rows.iter().map(|r| r.event_week).max().unwrap() + 1;
        let max_lag = rows.iter().map(|r| r.lag).max().unwrap();
        let mut cells: Vec<Vec<Option<u64>>> = vec![vec![None; max_lag + 1]; weeks];
        for r in rows {
            cells[r.event_week][r.lag] = Some(r.count);
        }
        let mut counts = Vec::with_capacity(weeks);
        for (t, row) in cells.into_iter().enumerate() {
            let full: Option<Vec<u64>> = row.into_iter().collect();
            counts.push(
                full.ok_or_else(|| Error::InvalidConfig(format!("event week {t} is missing lags in 0..={max_lag}")))?,
            );
        }
        Ok(RevisionTriangle { counts, max_lag })
    }

    pub fn rows(&self) -> Vec<TriangleRow> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(t, row)| {
                row.iter().enumerate().map(move |(k, &count)| TriangleRow { event_week: t, lag: k, count })
            })
            .collect()
    }

    pub fn weeks(&self) -> usize {
        self.counts.len()
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    /// Resting count for event week `t`.
    pub fn final_count(&self, t: usize) -> u64 {
        self.counts[t][self.max_lag]
    }

    pub fn at_lag(&self, t: usize, k: usize) -> u64 {
        self.counts[t][k.min(self.max_lag)]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<TriangleRow>, _>>()?;
        Self::from_rows(&rows)
    }
}

/// Count for event week `t` as known at week `s`.
pub fn report_as_of(tri: &RevisionTriangle, t: usize, s: usize) -> Result<u64> {
    if s < t {
        return Err(Error::FutureKnowledge { event: t, as_of: s });
    }
    if t >= tri.weeks() {
        return Err(Error::InvalidConfig(format!("event week {t} outside triangle of {} weeks", tri.weeks())));
    }
    Ok(tri.at_lag(t, s - t))
}

/// Smallest lag after which every report stays within `tol * final` of the
/// resting count. Zero when the resting count is zero.
pub fn stabilization_time(tri: &RevisionTriangle, t: usize, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance {tol} must be positive")));
    }
    if t >= tri.weeks() {
        return Err(Error::InvalidConfig(format!("event week {t} outside triangle of {} weeks", tri.weeks())));
    }
    let fin = tri.final_count(t) as f64;
    if fin == 0.0 {
        return Ok(0);
    }
    let row = &tri.counts[t];
    let mut k_star = 0;
    for (k, &c) in row.iter().enumerate() {
        if (c as f64 - fin).abs() > tol * fin {
            k_star = k + 1;
        }
    }
    Ok(k_star.min(tri.max_lag))
}

pub fn write_observations_csv<W: Write>(obs: &[Observation], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for o in obs {
        out.serialize(o)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations_csv<R: Read>(r: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<Observation>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn state_with(new_inf: f64) -> LatentState {
        let mut x = LatentState::seeded(0.0, 0.01, 2);
        x.epi.new_infections = new_inf;
        x.beh.b = 0.4;
        x
    }

    #[test]
    fn zero_infections_zero_reports() {
        let p = ModelParams { obs_noise_sd: 0.3, ..Default::default() };
        let o = observe(&state_with(0.0), &Action::zeros(0), &MisreportingRegime::none(), &p, derive_stream(1, 1));
        assert_eq!(o.reported_cases_per_100k, 0.0);
    }

    #[test]
    fn unit_conversion() {
        let p = ModelParams { rho0: 1.0, testing_gain: 0.0, ..Default::default() };
        let o = observe(&state_with(0.001), &Action::zeros(4), &MisreportingRegime::none(), &p, derive_stream(1, 1));
        assert!((o.reported_cases_per_100k - 100.0).abs() < 1e-9);
        assert_eq!(o.week, 5);
    }

    #[test]
    fn testing_raises_reports_not_infections() {
        let p = ModelParams { obs_noise_sd: 0.2, ..Default::default() };
        let x = state_with(0.002);
        let rng = derive_stream(3, 9);
        let reg = MisreportingRegime::none();
        let mut last = 0.0;
        for level in 0..=4u8 {
            let a = Action::zeros(0).with_level(p.testing_dim, level);
            let o = observe(&x, &a, &reg, &p, rng);
            assert!(o.reported_cases_per_100k > last);
            last = o.reported_cases_per_100k;
        }
    }

    #[test]
    fn survey_regimes() {
        assert_eq!(misreport_survey(0.37, &MisreportingRegime::none()), 0.37);
        assert!((misreport_survey(0.10, &MisreportingRegime::pure(0.78)) - 0.88).abs() < 1e-12);
        assert!((misreport_survey(0.5, &MisreportingRegime::mixed(0.5, 0.2)) - 0.6).abs() < 1e-12);
        // saturates
        assert_eq!(misreport_survey(0.9, &MisreportingRegime::pure(0.5)), 1.0);
    }

    #[test]
    fn regime_tag_consistency() {
        assert!(MisreportingRegime::pure(0.2).validate().is_ok());
        let bad = MisreportingRegime { tag: MisreportingTag::None, over_report_fraction: 0.3, inflation: 0.1 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_as_of_matures() {
        let tri = RevisionTriangle::from_finals(&[200, 50], &RevisionProfile::new("p", vec![0.4, 0.8, 1.0]).unwrap())
            .unwrap();
        assert_eq!(report_as_of(&tri, 0, 0).unwrap(), 80);
        assert_eq!(report_as_of(&tri, 0, 2).unwrap(), 200);
        assert_eq!(report_as_of(&tri, 0, 50).unwrap(), 200);
        assert!(matches!(report_as_of(&tri, 1, 0), Err(Error::FutureKnowledge { .. })));
    }

    #[test]
    fn no_delay_profile_is_final_everywhere() {
        let tri = RevisionTriangle::from_finals(&[7, 0, 13], &RevisionProfile::no_delay()).unwrap();
        for t in 0..3 {
            for s in t..t + 4 {
                assert_eq!(report_as_of(&tri, t, s).unwrap(), tri.final_count(t));
            }
            assert_eq!(stabilization_time(&tri, t, 0.05).unwrap(), 0);
        }
    }

    #[test]
    fn stabilization_examples() {
        let p = RevisionProfile::new("p", vec![0.5, 0.9, 1.0]).unwrap();
        let tri = RevisionTriangle::from_finals(&[1000], &p).unwrap();
        assert_eq!(stabilization_time(&tri, 0, 0.05).unwrap(), 2);

        let fast = RevisionProfile::new("fast", vec![0.9, 1.0, 1.0, 1.0]).unwrap();
        let slow = RevisionProfile::new("slow", vec![0.3, 0.6, 0.9, 1.0]).unwrap();
        let kf = stabilization_time(&RevisionTriangle::from_finals(&[1000], &fast).unwrap(), 0, 0.05).unwrap();
        let ks = stabilization_time(&RevisionTriangle::from_finals(&[1000], &slow).unwrap(), 0, 0.05).unwrap();
        assert!(kf < ks, "{kf} vs {ks}");

        let zero = RevisionTriangle::from_finals(&[0], &slow).unwrap();
        assert_eq!(stabilization_time(&zero, 0, 0.05).unwrap(), 0);
    }

    #[test]
    fn profile_validation() {
        assert!(RevisionProfile::new("x", vec![0.5, 0.4, 1.0]).is_err());
        assert!(RevisionProfile::new("x", vec![0.5, 0.9]).is_err());
        assert!(RevisionProfile::new("x", vec![]).is_err());
        for name in ["none", "fast", "slow"] {
            RevisionProfile::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn triangle_csv_round_trip() {
        let tri = RevisionTriangle::from_finals(&[120, 40, 0], &RevisionProfile::slow()).unwrap();
        let mut buf = Vec::new();
        tri.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("event_week,lag,count\n"));
        assert_eq!(RevisionTriangle::read_csv(&buf[..]).unwrap(), tri);
    }

    #[test]
    fn incomplete_triangle_rejected() {
        let rows = [TriangleRow { event_week: 0, lag: 0, count: 1 }, TriangleRow { event_week: 0, lag: 2, count: 3 }];
        assert!(RevisionTriangle::from_rows(&rows).is_err());
    }
}
