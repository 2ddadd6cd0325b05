//! Latent epidemic state for a single region.
//!
//! All epidemiological quantities are fractions of the population. The
//! infected compartment `I` also holds individuals already bound for
//! hospital admission (`hosp_pipeline`); they leave `I` for `Hosp` when their
//! pipeline slot comes due.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epi {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "Hosp")]
    pub hosp: f64,
    /// Fraction newly infected during the last step.
    pub new_infections: f64,
    /// Fraction admitted to hospital during the last step.
    #[serde(default)]
    pub hosp_admissions: f64,
    /// Pending admissions; slot 0 is admitted at the next step.
    #[serde(default)]
    pub hosp_pipeline: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imm {
    /// Fraction of `R` still protected.
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub mixing_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beh {
    /// Compliance.
    pub b: f64,
    /// Fatigue.
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reg {
    /// Transmissibility multiplier.
    pub m: f64,
    pub season_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub epi: Epi,
    pub imm: Imm,
    pub net: Net,
    pub beh: Beh,
    pub reg: Reg,
}

impl LatentState {
    /// A state with `infected` and `exposed` seeded into an otherwise fully
    /// susceptible population. `hosp_lag` sizes the admission pipeline.
    pub fn seeded(exposed: f64, infected: f64, hosp_lag: usize) -> Self {
        LatentState {
            epi: Epi {
                s: 1.0 - exposed - infected,
                e: exposed,
                i: infected,
                r: 0.0,
                hosp: 0.0,
                new_infections: 0.0,
                hosp_admissions: 0.0,
                hosp_pipeline: vec![0.0; hosp_lag],
            },
            imm: Imm { w: 1.0 },
            net: Net { mixing_scale: 1.0 },
            beh: Beh { b: 0.0, f: 0.0 },
            reg: Reg { m: 1.0, season_phase: 0.0 },
        }
    }

    pub fn disease_free(hosp_lag: usize) -> Self {
        Self::seeded(0.0, 0.0, hosp_lag)
    }

    pub fn total_mass(&self) -> f64 {
        let e = &self.epi;
        e.s + e.e + e.i + e.r + e.hosp
    }

    pub fn pending_admissions(&self) -> f64 {
        self.epi.hosp_pipeline.iter().sum()
    }

    /// Checks conservation and every range invariant.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let e = &self.epi;
        let mass = self.total_mass();
        if !mass.is_finite() || (mass - 1.0).abs() > MASS_TOLERANCE {
            problems.push(format!("compartments sum to {mass}, expected 1"));
        }
        for (name, v) in [
            ("S", e.s),
            ("E", e.e),
            ("I", e.i),
            ("R", e.r),
            ("Hosp", e.hosp),
            ("new_infections", e.new_infections),
            ("hosp_admissions", e.hosp_admissions),
        ] {
            if !(0.0..=1.0 + MASS_TOLERANCE).contains(&v) {
                problems.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if e.hosp_pipeline.iter().any(|&p| !(p >= 0.0)) {
            problems.push("negative hospital pipeline entry".into());
        }
        if self.pending_admissions() > e.i + MASS_TOLERANCE {
            problems.push("pending admissions exceed I".into());
        }
        for (name, v) in [("w", self.imm.w), ("b", self.beh.b), ("f", self.beh.f)] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.net.mixing_scale > 0.0 && self.net.mixing_scale <= 2.0) {
            problems.push(format!("mixing_scale = {} outside (0, 2]", self.net.mixing_scale));
        }
        if !(self.reg.m > 0.0 && self.reg.m.is_finite()) {
            problems.push(format!("m = {} must be positive", self.reg.m));
        }
        if !(0.0..1.0).contains(&self.reg.season_phase) {
            problems.push(format!("season_phase = {} outside [0, 1)", self.reg.season_phase));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_state_is_valid() {
        let x = LatentState::seeded(0.01, 0.02, 2);
        x.validate().unwrap();
        assert!((x.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_uses_compartment_names() {
        let x = LatentState::seeded(0.0, 0.1, 1);
        let v = serde_json::to_value(&x).unwrap();
        for key in ["S", "E", "I", "R", "Hosp", "new_infections"] {
            assert!(v["epi"].get(key).is_some(), "missing {key}");
        }
        assert!(v["imm"].get("w").is_some());
        assert!(v["net"].get("mixing_scale").is_some());
        assert!(v["beh"].get("b").is_some() && v["beh"].get("f").is_some());
        assert!(v["reg"].get("m").is_some());
        let back: LatentState = serde_json::from_value(v).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn detects_mass_leak() {
        let mut x = LatentState::seeded(0.0, 0.1, 0);
        x.epi.s -= 1e-6;
        assert!(x.validate().is_err());
    }
}
