//! HTTP+JSON service around the pipeline.
//!
//! Runs execute on the blocking pool, each with its own RNG. Run state lives
//! in memory; reports (never outputs) can optionally be written to a
//! directory as JSON.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use crate::attest::{InProcessBus, Tamper};
use crate::demo;
use crate::dp::{self, DpQuery, TradeoffPoint};
use crate::envelope::{Envelope, KeyPair};
use crate::pipeline::{self, PipelineConfig, RunReport};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const LISTEN_ENV: &str = "SPIDER_LISTEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct RunRecord {
    history: Vec<RunStatus>,
    report: Option<RunReport>,
    error: Option<ApiError>,
    output: Option<Envelope>,
}

impl RunRecord {
    fn status(&self) -> RunStatus {
        *self.history.last().expect("never empty")
    }
}

pub struct AppState {
    token: String,
    enclave: KeyPair,
    store: HashMap<String, Envelope>,
    reports_dir: Option<PathBuf>,
    runs: Mutex<HashMap<Uuid, RunRecord>>,
}

impl AppState {
    pub fn new(token: impl Into<String>, enclave: KeyPair) -> Self {
        Self {
            token: token.into(),
            enclave,
            store: HashMap::new(),
            reports_dir: None,
            runs: Mutex::new(HashMap::new()),
        }
    }

    /// Sealed inputs a run can reference by id instead of uploading.
    pub fn with_resource(mut self, id: impl Into<String>, envelope: Envelope) -> Self {
        self.store.insert(id.into(), envelope);
        self
    }

    pub fn with_reports_dir(mut self, dir: PathBuf) -> Self {
        self.reports_dir = Some(dir);
        self
    }

    fn update(&self, id: Uuid, f: impl FnOnce(&mut RunRecord)) {
        if let Some(rec) = self.runs.lock().expect("poisoned").get_mut(&id) {
            f(rec);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found() -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", "unknown run")
    }
}

impl From<pipeline::PipelineError> for ApiError {
    fn from(e: pipeline::PipelineError) -> Self {
        let status = match e {
            pipeline::PipelineError::ConfigInvalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/enclave/public-key", get(enclave_key))
        .route("/runs", post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/output", get(get_output))
        .route("/tradeoff", post(tradeoff))
        .route("/attest/session", post(attest_session))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn enclave_key(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "public_key": state.enclave.public_base64(),
        "fingerprint": hex::encode(state.enclave.fingerprint()),
    }))
}

#[derive(Debug, Deserialize)]
pub struct CreateRun {
    pub config: PipelineConfig,
    /// Base64 envelope sealed to the enclave key.
    #[serde(default)]
    pub input: Option<String>,
    /// Id of a sealed input already held by the service.
    #[serde(default)]
    pub resource_id: Option<String>,
}

fn check_bearer(headers: &HeaderMap, token: &str) -> Result<(), ApiError> {
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match given {
        Some(t) if t == token => Ok(()),
        _ => Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token",
        )),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn create_run(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    check_bearer(&headers, &state.token)?;
    let req: CreateRun = parse_json(&body)?;
    let input = match (&req.input, &req.resource_id) {
        (Some(b64), None) => {
            Envelope::from_base64(b64).map_err(|e| ApiError::bad_request(format!("input: {e}")))?
        }
        (None, Some(id)) => state
            .store
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::bad_request(format!("unknown resource `{id}`")))?,
        _ => return Err(ApiError::bad_request("give exactly one of input or resource_id")),
    };
    let plan = req.config.resolve(None)?;

    let id = Uuid::new_v4();
    state.runs.lock().expect("poisoned").insert(
        id,
        RunRecord {
            history: vec![RunStatus::Queued],
            report: None,
            error: None,
            output: None,
        },
    );

    let worker = Arc::clone(&state);
    tokio::task::spawn_blocking(move || {
        worker.update(id, |r| r.history.push(RunStatus::Running));
        let mut rng = ChaCha20Rng::from_rng(OsRng).expect("os entropy");
        let result = pipeline::run_pipeline(&plan, &input, &worker.enclave, &mut rng);
        let persisted = match &result {
            Ok((_, report)) => worker.reports_dir.as_ref().map(|dir| {
                let text = serde_json::to_vec_pretty(report).expect("serializable");
                std::fs::write(dir.join(format!("{id}.json")), text)
            }),
            Err(_) => None,
        };
        worker.update(id, |r| match (result, persisted) {
            (Ok(_), Some(Err(e))) => {
                r.error = Some(ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "io",
                    format!("writing report: {e}"),
                ));
                r.history.push(RunStatus::Failed);
            }
            (Ok((out, mut report)), _) => {
                report.run_id = id;
                r.report = Some(report);
                r.output = Some(out);
                r.history.push(RunStatus::Done);
            }
            (Err(e), _) => {
                r.error = Some(e.into());
                r.history.push(RunStatus::Failed);
            }
        });
    });

    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"run_id": id, "status": RunStatus::Queued})),
    ))
}

fn parse_id(id: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(id).map_err(|_| ApiError::not_found())
}

async fn get_run(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let id = parse_id(&id)?;
    let runs = state.runs.lock().expect("poisoned");
    let rec = runs.get(&id).ok_or_else(ApiError::not_found)?;
    Ok(Json(json!({
        "run_id": id,
        "status": rec.status(),
        "history": rec.history,
        "report": rec.report,
        "error": rec.error,
    })))
}

async fn get_output(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let runs = state.runs.lock().expect("poisoned");
    let rec = runs.get(&id).ok_or_else(ApiError::not_found)?;
    match &rec.output {
        Some(env) => Ok((
            [(header::CONTENT_TYPE, "application/octet-stream")],
            env.to_bytes(),
        )
            .into_response()),
        None => Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_ready",
            format!("run is {:?}", rec.status()).to_lowercase(),
        )),
    }
}

#[derive(Debug, Deserialize)]
pub struct TradeoffRequest {
    pub query: DpQuery,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_trials() -> usize {
    1000
}

const MAX_TRADEOFF_WORK: usize = 50_000_000;

async fn tradeoff(body: Bytes) -> Result<Json<Vec<TradeoffPoint>>, ApiError> {
    let req: TradeoffRequest = parse_json(&body)?;
    if req.epsilons.is_empty() {
        return Err(ApiError::bad_request("epsilons is empty"));
    }
    if req.trials.saturating_mul(req.epsilons.len()) > MAX_TRADEOFF_WORK {
        return Err(ApiError::bad_request("too many trials"));
    }
    let seed = req.seed.unwrap_or_else(dp::entropy_seed);
    let points = tokio::task::spawn_blocking(move || {
        dp::noise_tradeoff_curve(&req.query, &req.epsilons, req.trials, seed)
    })
    .await
    .expect("tradeoff task")
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "differential_privacy", e.to_string()))?;
    Ok(Json(points))
}

#[derive(Debug, Default, Deserialize)]
pub struct SessionRequest {
    #[serde(default)]
    pub tamper: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn attest_session(body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: SessionRequest = if body.is_empty() {
        SessionRequest::default()
    } else {
        parse_json(&body)?
    };
    let tamper = req
        .tamper
        .as_deref()
        .map(str::parse::<Tamper>)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let report = tokio::task::spawn_blocking(move || {
        let mut rng = match req.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_rng(OsRng).expect("os entropy"),
        };
        demo::run_demo(tamper, &mut InProcessBus, &mut rng)
    })
    .await
    .expect("session task");
    Ok(Json(json!({
        "transcript": report.transcript,
        "output_released": report.output_csv.is_some(),
        "plaintext_leaked": report.plaintext_leaked,
    })))
}
