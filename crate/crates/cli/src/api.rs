//! Request and response types shared by the HTTP service and the command line, and the
//! operations behind them. Both front ends serialise results with [`to_json`], so the same
//! request produces the same bytes on either.

use std::collections::BTreeMap;

use oodsim_core::data::PolicyRecord;
use oodsim_core::sim::search::SearchConfig;
use oodsim_core::sim::{Counterfactual, Plan, PolicyEdit, Scenario, Simulator, Trajectory};
use oodsim_core::train::Checkpoint;
use oodsim_core::{Error, Month};
use serde::{Deserialize, Serialize};

/// Largest simulation budget accepted by the service.
pub const MAX_BUDGET: usize = 100_000;
/// Largest schedule space accepted by the service.
pub const MAX_SPACE: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    ModelNotLoaded,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::BadRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::ModelNotLoaded => 503,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), detail: BTreeMap::new() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::BadRequest, message)
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.detail.insert(key.into(), value.into());
        self
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownState(_) | Error::UnknownPolicy(_) => ErrorCode::NotFound,
            Error::Schema(_)
            | Error::Value(_)
            | Error::Config(_)
            | Error::WindowOutOfRange(_)
            | Error::InvalidEdit(_)
            | Error::EmptyPool
            | Error::BudgetZero
            | Error::SpaceTooLarge(_)
            | Error::Json(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        let kind = format!("{e:?}");
        let kind = kind.split(['(', ' ', '{']).next().unwrap_or_default().to_string();
        ApiError::new(code, e.to_string()).with("kind", kind)
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::bad_request(format!("malformed request: {e}"))
            .with("line", e.line().to_string())
            .with("column", e.column().to_string())
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// Compact JSON, the wire format of every response.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("response types serialise")
}

pub fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    Ok(serde_json::from_slice(body)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateInfo {
    pub id: String,
    pub first_month: Month,
    pub last_month: Month,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatesResponse {
    pub states: Vec<StateInfo>,
    pub history: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoliciesResponse {
    pub policies: Vec<PolicyRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub state: String,
    pub window_start: Month,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    pub scenario: Scenario,
    pub edit: PolicyEdit,
}

fn default_depth() -> usize {
    SearchConfig::default().depth
}

fn default_budget() -> usize {
    SearchConfig::default().budget
}

fn default_exploration() -> f64 {
    SearchConfig::default().exploration
}

fn default_max_subset() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeRequest {
    pub scenario: Scenario,
    /// Candidate policies; falls back to the scenario's own pool.
    #[serde(default)]
    pub pool: Option<Vec<String>>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_exploration")]
    pub exploration: f64,
    #[serde(default = "default_max_subset")]
    pub max_subset: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OptimizeRequest {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            depth: self.depth,
            budget: self.budget,
            exploration: self.exploration,
            max_subset: self.max_subset,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookResponse {
    pub size: usize,
    pub dim: usize,
    pub codes: Vec<Vec<f64>>,
    pub usage: Vec<u64>,
    pub reseeds: u64,
}

pub fn health(sim: Option<&Simulator>, fingerprint: Option<&str>) -> Health {
    Health {
        status: if sim.is_some() { "ok" } else { "no_model" }.into(),
        model_fingerprint: fingerprint.map(str::to_string),
    }
}

pub fn states(sim: &Simulator) -> StatesResponse {
    let panel = &sim.data().panel;
    StatesResponse {
        states: panel
            .states()
            .iter()
            .map(|s| StateInfo { id: s.clone(), first_month: panel.first_month(), last_month: panel.last_month() })
            .collect(),
        history: sim.history(),
        horizon: sim.horizon(),
    }
}

/// Policy records, optionally restricted to one state.
pub fn policies(sim: &Simulator, state: Option<&str>) -> ApiResult<PoliciesResponse> {
    let corpus = &sim.data().corpus;
    let policies = match state {
        Some(s) => {
            sim.data().panel.state_index(s)?;
            corpus.for_state(s).cloned().collect()
        }
        None => corpus.records().cloned().collect(),
    };
    Ok(PoliciesResponse { policies })
}

pub fn forecast(sim: &Simulator, scenario: &Scenario) -> ApiResult<ForecastResponse> {
    let trajectory = sim.forecast(scenario)?;
    Ok(ForecastResponse { state: scenario.state.clone(), window_start: scenario.window_start, trajectory })
}

pub fn counterfactual(sim: &Simulator, req: &CounterfactualRequest) -> ApiResult<Counterfactual> {
    Ok(sim.counterfactual(&req.scenario, &req.edit)?)
}

/// Runs the search. With `capped` the request must fit the service limits on budget and
/// schedule space.
pub fn optimize(sim: &Simulator, req: &OptimizeRequest, capped: bool) -> ApiResult<Plan> {
    if capped {
        if req.budget > MAX_BUDGET {
            return Err(ApiError::bad_request(format!("budget {} exceeds {MAX_BUDGET}", req.budget))
                .with("limit", MAX_BUDGET.to_string()));
        }
        let pool = req.pool.as_ref().or(req.scenario.pool.as_ref()).map_or(0, Vec::len);
        let n = actions_len(pool, req.max_subset.max(1));
        let space = (0..req.depth).fold(1u128, |acc, _| acc.saturating_mul(n));
        if space > MAX_SPACE {
            return Err(ApiError::bad_request(format!("search space of {space} schedules exceeds {MAX_SPACE}"))
                .with("limit", MAX_SPACE.to_string()));
        }
    }
    Ok(sim.optimize(&req.scenario, req.pool.as_deref(), &req.search_config())?)
}

/// Number of actions over `pool` distinct policies: the no-op plus subsets of at most
/// `max_subset` members. Saturates.
fn actions_len(pool: usize, max_subset: usize) -> u128 {
    let (mut total, mut choose) = (1u128, 1u128);
    for k in 1..=max_subset.min(pool) {
        choose = choose.saturating_mul((pool - k + 1) as u128) / k as u128;
        total = total.saturating_add(choose);
    }
    total
}

pub fn codebook(checkpoint: &Checkpoint) -> CodebookResponse {
    let cb = &checkpoint.model.codebook;
    CodebookResponse {
        size: cb.codes.nrows(),
        dim: cb.codes.ncols(),
        codes: cb.codes.rows().into_iter().map(|r| r.to_vec()).collect(),
        usage: cb.usage.clone(),
        reseeds: cb.reseeds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_shape_and_status() {
        let e: ApiError = Error::UnknownState("XX".into()).into();
        assert_eq!(e.code, ErrorCode::NotFound);
        assert_eq!(e.code.status(), 404);
        assert_eq!(e.detail["kind"], "UnknownState");
        let json = to_json(&e);
        assert!(json.starts_with(r#"{"code":"NOT_FOUND","message":"#), "{json}");
        let e: ApiError = Error::EmptyPool.into();
        assert_eq!((e.code, e.detail["kind"].as_str()), (ErrorCode::BadRequest, "EmptyPool"));
        let e: ApiError = Error::Divergence("x".into()).into();
        assert_eq!(e.code.status(), 500);
    }

    #[test]
    fn malformed_json_is_bad_request() {
        let e = parse::<Scenario>(b"{\"state\": ").unwrap_err();
        assert_eq!(e.code, ErrorCode::BadRequest);
        let e = parse::<Scenario>(br#"{"state":"A","window_start":"2020-01","extra":1}"#).unwrap_err();
        assert_eq!(e.code, ErrorCode::BadRequest);
    }

    #[test]
    fn optimize_request_defaults() {
        let req: OptimizeRequest = parse(br#"{"scenario":{"state":"A","window_start":"2020-01"},"pool":["p"]}"#).unwrap();
        assert_eq!((req.depth, req.budget, req.max_subset, req.seed), (2, 1000, 1, 0));
        assert_eq!(req.exploration, std::f64::consts::SQRT_2);
    }

    #[test]
    fn action_counts() {
        assert_eq!(actions_len(3, 1), 4);
        assert_eq!(actions_len(3, 2), 7);
        assert_eq!(actions_len(0, 2), 1);
        assert_eq!(actions_len(30, 2), 1 + 30 + 435);
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        assert_eq!(actions_len(6, 3), oodsim_core::sim::search::actions(&ids, 3).len() as u128);
    }
}
