//! The 13-dimensional ordinal intervention vector.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DIMS: usize = 13;
pub const MAX_LEVEL: u8 = 4;

/// Default indicator names for dims 0..13. The dims are anonymous indices;
/// this map is only used for labelling and is overridable in config.
pub const DEFAULT_DIM_NAMES: [&str; NUM_DIMS] = [
    "school_closing",
    "workplace_closing",
    "cancel_public_events",
    "gathering_restrictions",
    "close_public_transport",
    "stay_at_home",
    "internal_movement",
    "international_travel",
    "public_information",
    "testing_policy",
    "contact_tracing",
    "facial_coverings",
    "vaccination_policy",
];

pub const TESTING_DIM: usize = 9;
pub const MASKING_DIM: usize = 11;
pub const VACCINATION_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionViolation {
    WrongArity { expected: usize, got: usize },
    OutOfRange { index: usize, value: i64 },
}

impl fmt::Display for ActionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionViolation::WrongArity { expected, got } => {
                write!(f, "wrong arity: expected {expected} dims, got {got}")
            }
            ActionViolation::OutOfRange { index, value } => {
                write!(f, "dim {index} = {value} outside 0..=4")
            }
        }
    }
}

/// Checks arity and per-dim range, listing every offending entry.
pub fn validate_action(dims: &[i64]) -> std::result::Result<(), Vec<ActionViolation>> {
    let mut violations = Vec::new();
    if dims.len() != NUM_DIMS {
        violations.push(ActionViolation::WrongArity { expected: NUM_DIMS, got: dims.len() });
    }
    for (index, &value) in dims.iter().enumerate() {
        if !(0..=MAX_LEVEL as i64).contains(&value) {
            violations.push(ActionViolation::OutOfRange { index, value });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// One week's intervention. Construction goes through validation, so every
/// `Action` value satisfies the range and arity invariants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAction", into = "RawAction")]
pub struct Action {
    week: u32,
    dims: [u8; NUM_DIMS],
}

/// Wire encoding: `{"week": int, "dims": [13 ints]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAction {
    pub week: i64,
    pub dims: Vec<i64>,
}

impl TryFrom<RawAction> for Action {
    type Error = Error;

    fn try_from(raw: RawAction) -> Result<Self> {
        if raw.week < 0 || raw.week > u32::MAX as i64 {
            return Err(Error::InvalidConfig(format!("action week {} must be >= 0", raw.week)));
        }
        Action::from_levels(raw.week as u32, &raw.dims)
    }
}

impl From<Action> for RawAction {
    fn from(a: Action) -> Self {
        RawAction { week: a.week as i64, dims: a.dims.iter().map(|&d| d as i64).collect() }
    }
}

impl Action {
    pub fn from_levels(week: u32, dims: &[i64]) -> Result<Self> {
        validate_action(dims).map_err(Error::InvalidAction)?;
        let mut out = [0u8; NUM_DIMS];
        for (o, &d) in out.iter_mut().zip(dims) {
            *o = d as u8;
        }
        Ok(Action { week, dims: out })
    }

    pub fn new(week: u32, dims: [u8; NUM_DIMS]) -> Result<Self> {
        let wide: Vec<i64> = dims.iter().map(|&d| d as i64).collect();
        Self::from_levels(week, &wide)
    }

    pub fn uniform(week: u32, level: u8) -> Self {
        assert!(level <= MAX_LEVEL, "level {level} outside 0..=4");
        Action { week, dims: [level; NUM_DIMS] }
    }

    pub fn zeros(week: u32) -> Self {
        Self::uniform(week, 0)
    }

    pub fn week(&self) -> u32 {
        self.week
    }

    pub fn dims(&self) -> &[u8; NUM_DIMS] {
        &self.dims
    }

    pub fn level(&self, dim: usize) -> u8 {
        self.dims[dim]
    }

    pub fn with_week(mut self, week: u32) -> Self {
        self.week = week;
        self
    }

    /// Returns a copy with `dim` set to `level`, clamped to 0..=4.
    pub fn with_level(mut self, dim: usize, level: u8) -> Self {
        self.dims[dim] = level.min(MAX_LEVEL);
        self
    }

    /// Mean level over all dims scaled to [0, 1].
    pub fn stringency(&self) -> f64 {
        stringency(self)
    }
}

pub fn stringency(a: &Action) -> f64 {
    let total: u32 = a.dims.iter().map(|&d| d as u32).sum();
    total as f64 / (NUM_DIMS as f64 * MAX_LEVEL as f64)
}

/// Re-stamps week indices 0..n on a sequence of actions.
pub fn renumber(actions: &[Action], start_week: u32) -> Vec<Action> {
    actions.iter().enumerate().map(|(i, a)| a.with_week(start_week + i as u32)).collect()
}

/// Writes `week,<13 dim columns>` rows.
pub fn write_actions_csv<W: Write>(actions: &[Action], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(std::iter::once("week").chain(DEFAULT_DIM_NAMES))?;
    for a in actions {
        let mut row = vec![a.week.to_string()];
        row.extend(a.dims.iter().map(|d| d.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads what [`write_actions_csv`] writes. Levels are taken as-is, not rescaled.
pub fn read_actions_csv<R: Read>(r: R) -> Result<Vec<Action>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut actions = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let nums: Vec<i64> = rec
            .iter()
            .map(|c| c.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { line, message: "non-integer field".into() })?;
        let (week, dims) = nums.split_first().ok_or(Error::Parse { line, message: "empty row".into() })?;
        actions.push(Action::try_from(RawAction { week: *week, dims: dims.to_vec() })?);
    }
    Ok(actions)
}
