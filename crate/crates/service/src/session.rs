use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use epiworld::action::validate_action;
use epiworld::dynamics::step;
use epiworld::filter::{filter_step, init_belief, summarize, BeliefSummary, FilterConfig};
use epiworld::observation::observe;
use epiworld::rng::purpose;
use epiworld::rollout::{aggregate_metrics, evaluate, fan_chart, rollout_samples, FanRow, RankedCandidate};
use epiworld::scenarios::config_hash;
use epiworld::{
    Action, Belief, Error, Execution, LatentState, ModelParams, Observation, OutcomeMetrics, Plan, RewardSpec,
    RngStream, ScenarioConfig,
};

use crate::error::ApiError;

const ROLLOUT_KEY: u64 = 0x524F_4C4C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub purpose: String,
    pub week: Option<u32>,
    pub stream: RngStream,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub config: ScenarioConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub dims: Vec<i64>,
    /// Defaults to the session cursor; any other value is rejected.
    pub week: Option<i64>,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub id: String,
    pub week: u32,
    pub action: Action,
    pub observation: Observation,
    pub summary: BeliefSummary,
    pub config_hash: String,
    pub seed_ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateAction {
    pub dims: Vec<i64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRequest {
    pub candidates: Vec<Vec<CandidateAction>>,
    pub samples: usize,
    #[serde(default)]
    pub reward: Option<RewardSpec>,
    /// Optional per-candidate weekly vaccination fractions.
    #[serde(default)]
    pub vaccination: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateResult {
    pub index: usize,
    pub rank: usize,
    pub score: f64,
    pub feasible: bool,
    pub metrics: OutcomeMetrics,
    pub fan_chart: Vec<FanRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutResponse {
    pub id: String,
    pub week: u32,
    pub samples: usize,
    pub candidates: Vec<CandidateResult>,
    pub ranking: Vec<RankedCandidate>,
    pub config_hash: String,
    pub seed_ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub id: String,
    pub week: u32,
    pub seed: u64,
    pub config_hash: String,
    pub state_hash: String,
    pub twin_truth: bool,
    pub summary: BeliefSummary,
    pub seed_ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub id: String,
    pub week: u32,
    pub actions: Vec<Action>,
    pub observations: Vec<Observation>,
    pub summaries: Vec<BeliefSummary>,
    pub config_hash: String,
    pub seed_ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Export {
    pub id: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub state_hash: String,
    pub actions: Vec<Action>,
    pub observations: Vec<Observation>,
    pub summaries: Vec<BeliefSummary>,
    pub seed_ledger: Vec<LedgerEntry>,
}

/// One analyst session: a hidden true world, the analyst's belief about it
/// and the committed action history.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub config_hash: String,
    truth_params: ModelParams,
    truth: LatentState,
    belief: Belief,
    actions: Vec<Action>,
    observations: Vec<Observation>,
    summaries: Vec<BeliefSummary>,
    ledger: Vec<LedgerEntry>,
    idempotency: HashMap<String, (String, StepResponse)>,
}

fn entry(purpose: &str, week: Option<u32>, stream: RngStream) -> LedgerEntry {
    LedgerEntry { purpose: purpose.into(), week, stream }
}

impl Session {
    pub fn new(id: String, req: CreateRequest) -> Result<Self, ApiError> {
        let CreateRequest { config, seed } = req;
        let violations = config.action_violations();
        if !violations.is_empty() {
            return Err(ApiError::unprocessable("invalid_action", "action table has invalid entries", violations));
        }
        config.validate().map_err(|e| ApiError::unprocessable("invalid_config", &e.to_string(), vec![]))?;
        let root = RngStream::new(seed);
        let prior_stream = root.child(purpose::PRIOR);
        let belief = init_belief(&config.prior, config.particles, prior_stream)
            .map_err(|e| ApiError::unprocessable("invalid_config", &e.to_string(), vec![]))?;
        let truth_params = config.truth_params.clone().unwrap_or_else(|| config.params.clone());
        let truth = config.initial.to_state(truth_params.hosp_lag);
        let summary = summarize(&belief, &config.params);
        Ok(Session {
            config_hash: config_hash(&config),
            id,
            seed,
            truth_params,
            truth,
            belief,
            actions: vec![],
            observations: vec![],
            summaries: vec![summary],
            ledger: vec![entry("prior", Some(0), prior_stream)],
            idempotency: HashMap::new(),
            config,
        })
    }

    pub fn cursor(&self) -> u32 {
        self.actions.len() as u32
    }

    fn filter_config(&self) -> FilterConfig {
        FilterConfig { particles: self.config.particles, density: self.config.density, ..Default::default() }
    }

    /// Hash of everything a step can change.
    pub fn state_hash(&self) -> String {
        #[derive(Serialize)]
        struct Mutable<'a> {
            truth: &'a LatentState,
            belief: &'a Belief,
            actions: &'a [Action],
            observations: &'a [Observation],
            ledger: &'a [LedgerEntry],
            idempotency_keys: Vec<&'a String>,
        }
        let mut keys: Vec<&String> = self.idempotency.keys().collect();
        keys.sort();
        let m = Mutable {
            truth: &self.truth,
            belief: &self.belief,
            actions: &self.actions,
            observations: &self.observations,
            ledger: &self.ledger,
            idempotency_keys: keys,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&m).expect("state serializes")))
    }

    pub fn step(&mut self, req: StepRequest) -> Result<StepResponse, ApiError> {
        let fingerprint = serde_json::to_string(&(&req.dims, req.week)).expect("request serializes");
        if let Some(key) = &req.idempotency_key {
            if let Some((fp, resp)) = self.idempotency.get(key) {
                if *fp == fingerprint {
                    return Ok(resp.clone());
                }
                return Err(ApiError::new(
                    409,
                    "idempotency_conflict",
                    "idempotency key was already used with a different request",
                    vec![format!("key {key:?} committed week {}", resp.week)],
                ));
            }
        }
        let cursor = self.cursor();
        if let Err(vs) = validate_action(&req.dims) {
            return Err(ApiError::unprocessable(
                "invalid_action",
                "action has invalid entries",
                vs.iter().map(|v| v.to_string()).collect(),
            ));
        }
        if let Some(w) = req.week {
            if w != cursor as i64 {
                return Err(ApiError::unprocessable(
                    "week_mismatch",
                    "action week must equal the session cursor",
                    vec![format!("expected week {cursor}, got {w}")],
                ));
            }
        }
        let action = Action::from_levels(cursor, &req.dims).expect("validated");
        let root = RngStream::new(self.seed);
        let truth_stream = root.child(purpose::TRUTH).child(cursor as u64);
        let filter_stream = root.child(purpose::RESAMPLE).child(cursor as u64);
        let regime = self.config.regime;
        let truth =
            step(&self.truth, &action, &self.truth_params, truth_stream.child(purpose::DYNAMICS)).map_err(internal)?;
        let observation = observe(&truth, &action, &regime, &self.truth_params, truth_stream.child(purpose::OBSERVE));
        let belief = match filter_step(
            &self.belief,
            &action,
            &observation,
            &self.config.params,
            &regime,
            &self.filter_config(),
            filter_stream,
        ) {
            Ok(b) => b,
            Err(e @ Error::ObservationImpossible) => {
                return Err(ApiError::unprocessable("observation_impossible", &e.to_string(), vec![]))
            }
            Err(e) => return Err(internal(e)),
        };
        let summary = summarize(&belief, &self.config.params);
        let used = vec![entry("truth", Some(cursor), truth_stream), entry("filter", Some(cursor), filter_stream)];

        self.truth = truth;
        self.belief = belief;
        self.actions.push(action);
        self.observations.push(observation.clone());
        self.summaries.push(summary.clone());
        self.ledger.extend(used.iter().cloned());
        let resp = StepResponse {
            id: self.id.clone(),
            week: self.cursor(),
            action,
            observation,
            summary,
            config_hash: self.config_hash.clone(),
            seed_ledger: used,
        };
        if let Some(key) = req.idempotency_key {
            self.idempotency.insert(key, (fingerprint, resp.clone()));
        }
        Ok(resp)
    }

    /// Evaluates candidate plans from the current belief without touching the
    /// session. Every candidate uses the same rollout streams, so identical
    /// candidates get identical results.
    pub fn rollouts(&self, req: &RolloutRequest) -> Result<RolloutResponse, ApiError> {
        let mut details = Vec::new();
        if req.candidates.is_empty() {
            details.push("candidates: at least one candidate is required".to_string());
        }
        if req.samples == 0 {
            details.push("samples: must be at least 1".to_string());
        }
        for (i, c) in req.candidates.iter().enumerate() {
            for (j, a) in c.iter().enumerate() {
                if let Err(vs) = validate_action(&a.dims) {
                    details.extend(vs.iter().map(|v| format!("candidates[{i}][{j}]: {v}")));
                }
            }
        }
        if let Some(vax) = &req.vaccination {
            if vax.len() != req.candidates.len() {
                details.push(format!("vaccination: expected {} schedules, got {}", req.candidates.len(), vax.len()));
            }
            for (i, v) in vax.iter().enumerate() {
                if v.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    details.push(format!("vaccination[{i}]: fractions must lie in [0, 1]"));
                }
            }
        }
        let reward = req.reward.unwrap_or_default();
        if reward.validate().is_err() {
            details.push("reward: weights must be finite".to_string());
        }
        if !details.is_empty() {
            return Err(ApiError::unprocessable("invalid_candidates", "rollout request is invalid", details));
        }

        let cursor = self.cursor();
        let stream = RngStream::new(self.seed).keyed(&[ROLLOUT_KEY, cursor as u64]);
        let world = self.config.world();
        let start = epiworld::rollout::RolloutStart::Belief(&self.belief);
        let mut metrics = Vec::with_capacity(req.candidates.len());
        let mut fans = Vec::with_capacity(req.candidates.len());
        for (i, c) in req.candidates.iter().enumerate() {
            let actions = c
                .iter()
                .enumerate()
                .map(|(j, a)| Action::from_levels(cursor + j as u32, &a.dims).expect("validated"))
                .collect();
            let vaccination = req.vaccination.as_ref().map(|v| v[i].clone()).unwrap_or_default();
            let plan = Plan { actions, vaccination };
            let results =
                rollout_samples(start, &plan, &world, req.samples, stream, Execution::default()).map_err(internal)?;
            metrics.push(aggregate_metrics(&results));
            fans.push(fan_chart(&results));
        }
        let ranking = evaluate(&metrics, &reward).map_err(internal)?;
        let mut candidates: Vec<CandidateResult> = metrics
            .into_iter()
            .zip(fans)
            .enumerate()
            .map(|(index, (metrics, fan_chart))| CandidateResult {
                index,
                rank: 0,
                score: reward.score(&metrics),
                feasible: reward.feasible(&metrics),
                metrics,
                fan_chart,
            })
            .collect();
        for r in &ranking {
            candidates[r.index].rank = r.rank;
        }
        Ok(RolloutResponse {
            id: self.id.clone(),
            week: cursor,
            samples: req.samples,
            candidates,
            ranking,
            config_hash: self.config_hash.clone(),
            seed_ledger: vec![entry("rollout", Some(cursor), stream)],
        })
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            week: self.cursor(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            state_hash: self.state_hash(),
            twin_truth: self.config.truth_params.is_some(),
            summary: self.summaries.last().expect("initial summary").clone(),
            seed_ledger: self.ledger.clone(),
        }
    }

    pub fn history(&self) -> History {
        History {
            id: self.id.clone(),
            week: self.cursor(),
            actions: self.actions.clone(),
            observations: self.observations.clone(),
            summaries: self.summaries.clone(),
            config_hash: self.config_hash.clone(),
            seed_ledger: self.ledger.clone(),
        }
    }

    pub fn export(&self) -> Export {
        Export {
            id: self.id.clone(),
            seed: self.seed,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            state_hash: self.state_hash(),
            actions: self.actions.clone(),
            observations: self.observations.clone(),
            summaries: self.summaries.clone(),
            seed_ledger: self.ledger.clone(),
        }
    }
}

fn internal(e: Error) -> ApiError {
    ApiError::new(500, "internal", &e.to_string(), vec![])
}
