//! JSON-over-HTTP service on `/v1`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use oodsim_core::sim::Simulator;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::api::{self, ApiError, ApiResult, ErrorCode};

/// The loaded model shared by all requests. It is never mutated after start-up.
pub struct AppState {
    sim: Option<Arc<Simulator>>,
    fingerprint: Option<String>,
}

impl AppState {
    pub fn new(sim: Simulator) -> Self {
        let fingerprint = Some(sim.checkpoint().hash());
        AppState { sim: Some(Arc::new(sim)), fingerprint }
    }

    /// A service without a model; every model endpoint answers MODEL_NOT_LOADED.
    pub fn empty() -> Self {
        AppState { sim: None, fingerprint: None }
    }

    fn sim(&self) -> ApiResult<Arc<Simulator>> {
        self.sim.clone().ok_or_else(|| ApiError::new(ErrorCode::ModelNotLoaded, "no model is loaded"))
    }
}

type Shared = State<Arc<AppState>>;

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(e: ApiError) -> Response {
    let status = StatusCode::from_u16(e.code.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, api::to_json(&e))
}

fn reply<T: serde::Serialize>(result: ApiResult<T>) -> Response {
    match result {
        Ok(v) => json_response(StatusCode::OK, api::to_json(&v)),
        Err(e) => error_response(e),
    }
}

/// Runs `f` on the blocking pool, where model work belongs.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(ErrorCode::Internal, format!("request task failed: {e}"))))
}

fn body(b: Result<Bytes, BytesRejection>) -> ApiResult<Bytes> {
    b.map_err(|e| ApiError::bad_request(format!("unreadable request body: {e}")))
}

async fn health(State(st): Shared) -> Response {
    reply(Ok(api::health(st.sim.as_deref(), st.fingerprint.as_deref())))
}

async fn states(State(st): Shared) -> Response {
    reply(st.sim().map(|s| api::states(&s)))
}

#[derive(Deserialize)]
struct PolicyQuery {
    state: Option<String>,
}

async fn policies(State(st): Shared, q: Result<Query<PolicyQuery>, QueryRejection>) -> Response {
    let result = (|| -> ApiResult<_> {
        let Query(q) = q.map_err(|e| ApiError::bad_request(format!("bad query: {e}")))?;
        let sim = st.sim()?;
        api::policies(&sim, q.state.as_deref())
    })();
    reply(result)
}

async fn codebook(State(st): Shared) -> Response {
    reply(st.sim().map(|s| api::codebook(s.checkpoint())))
}

async fn forecast(State(st): Shared, b: Result<Bytes, BytesRejection>) -> Response {
    let run = || -> ApiResult<_> {
        let sim = st.sim()?;
        let scenario = api::parse(&body(b)?)?;
        Ok((sim, scenario))
    };
    match run() {
        Ok((sim, scenario)) => reply(blocking(move || api::forecast(&sim, &scenario)).await),
        Err(e) => error_response(e),
    }
}

async fn counterfactual(State(st): Shared, b: Result<Bytes, BytesRejection>) -> Response {
    let run = || -> ApiResult<_> {
        let sim = st.sim()?;
        let req: api::CounterfactualRequest = api::parse(&body(b)?)?;
        Ok((sim, req))
    };
    match run() {
        Ok((sim, req)) => reply(blocking(move || api::counterfactual(&sim, &req)).await),
        Err(e) => error_response(e),
    }
}

async fn optimize(State(st): Shared, b: Result<Bytes, BytesRejection>) -> Response {
    let run = || -> ApiResult<_> {
        let sim = st.sim()?;
        let req: api::OptimizeRequest = api::parse(&body(b)?)?;
        Ok((sim, req))
    };
    match run() {
        Ok((sim, req)) => reply(blocking(move || api::optimize(&sim, &req, true)).await),
        Err(e) => error_response(e),
    }
}

async fn not_found() -> Response {
    error_response(ApiError::new(ErrorCode::NotFound, "no such endpoint"))
}

async fn method_not_allowed() -> Response {
    let e = ApiError::bad_request("method not allowed on this endpoint");
    json_response(StatusCode::METHOD_NOT_ALLOWED, api::to_json(&e))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/states", get(states))
        .route("/v1/policies", get(policies))
        .route("/v1/codebook", get(codebook))
        .route("/v1/forecast", post(forecast))
        .route("/v1/counterfactual", post(counterfactual))
        .route("/v1/optimize", post(optimize))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

/// Binds `addr` and returns the bound address with the server future.
pub async fn bind(
    state: AppState,
    addr: &str,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(Arc::new(state));
    Ok((local, async move { axum::serve(listener, app).await }))
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(Arc::new(state));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
