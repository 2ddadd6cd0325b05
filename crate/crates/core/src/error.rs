use thiserror::Error;

use crate::action::ActionViolation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action: {}", format_violations(.0))]
    InvalidAction(Vec<ActionViolation>),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("observation impossible under model")]
    ObservationImpossible,

    #[error("observation week {got} does not follow belief week {expected}")]
    WeekMismatch { expected: u32, got: u32 },

    #[error("future knowledge: as-of week {as_of} precedes event week {event}")]
    FutureKnowledge { event: usize, as_of: usize },

    #[error("undefined reduction: series starts at zero")]
    UndefinedReduction,

    #[error("horizon exceeds table: week {week} requested, table has {len} entries")]
    HorizonExceedsTable { week: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("sequences differ before divergence week {week}")]
    PrefixMismatch { week: usize },

    #[error("group statistics undefined for group size {0}")]
    GroupTooSmall(usize),

    #[error("every objective evaluation returned -inf")]
    AllEvaluationsFailed,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing header")]
    MissingHeader,

    #[error("missing columns: {0}")]
    MissingColumns(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[ActionViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
