//! Epidemic world model engine.
//!
//! An epidemic is treated as a controlled, partially observed dynamical
//! system: latent disease, behavior and regime dynamics ([`dynamics`]), a
//! policy-dependent observation layer ([`observation`]), particle-filter
//! belief tracking ([`filter`]), likelihood-based calibration
//! ([`calibrate`]), counterfactual rollouts ([`rollout`]), policies and
//! metrics ([`policy`]), planners and policy optimizers ([`optimize`]), and
//! case-study harnesses ([`scenarios`]).

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod calibrate;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod filter;
pub mod observation;
pub mod optimize;
pub mod params;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scenarios;
pub mod state;

pub use action::{stringency, validate_action, Action, ActionViolation, NUM_DIMS};
pub use error::{Error, Result};
pub use exec::Execution;
pub use filter::{Belief, BeliefSummary, FilterConfig, PriorConfig};
pub use observation::{MisreportingRegime, Observation, RevisionProfile, RevisionTriangle};
pub use params::ModelParams;
pub use policy::PolicySpec;
pub use rng::{derive_stream, RngStream};
pub use rollout::{OutcomeMetrics, Plan, RewardSpec, WorldModel};
pub use scenarios::ScenarioConfig;
pub use state::LatentState;
