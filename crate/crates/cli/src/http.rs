//! HTTP front end for the administration dashboard. Handlers only translate:
//! mutating routes become scenario commands run through the shared session,
//! so every state reachable here is reachable from a scenario file.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use faas_core::orchestrator::Orchestrator;
use faas_core::registry::{verify_ledger_bytes, ChainStatus};
use faas_core::scenario::{Command, Session, SessionError};

/// Longest accepted alert long-poll.
const MAX_WAIT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Session>>,
    ledger_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(session: Session, ledger_path: Option<PathBuf>) -> Self {
        Self {
            session: Arc::new(Mutex::new(session)),
            ledger_path,
        }
    }

    fn orchestrator(&self) -> Result<Arc<Orchestrator>, ApiError> {
        self.session
            .lock()
            .expect("session lock")
            .orchestrator()
            .cloned()
            .ok_or_else(|| ApiError::from(SessionError::NoFederation))
    }
}

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "BadRequest".into(),
            message: message.into(),
        }
    }
}

/// Status for an error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "AuthFailed" => StatusCode::UNAUTHORIZED,
        "Forbidden" | "Denied" | "NoGrant" => StatusCode::FORBIDDEN,
        "NoFederation" | "UnknownLogin" | "UnknownService" | "UnknownTenant" => StatusCode::NOT_FOUND,
        "AlreadyMember" | "DuplicateService" | "FederationExists" | "SectionUnavailable" | "LastMember" | "NotActive"
        | "Terminated" | "FederationClosed" | "InvalidChoice" | "CapacityExhausted" => StatusCode::CONFLICT,
        "PolicyInvalid" | "SlaInvalid" | "InvariantViolation" | "InvalidServiceId" | "InvalidRequest" | "InvalidOffer"
        | "TooFewFounders" | "MissingPrerequisite" | "NoFreeSection" | "NoCandidates" | "InvalidCursor"
        | "NotACommand" => StatusCode::UNPROCESSABLE_ENTITY,
        "ConfigurationFailed" | "DeallocationFailed" | "FabricError" | "AdapterFailure" | "ProviderFailed" => {
            StatusCode::BAD_GATEWAY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        Self {
            status: status_for(e.code()),
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn to_json<T: serde::Serialize>(v: &T) -> ApiResult {
    Ok(Json(serde_json::to_value(v).expect("responses serialize")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/federation", get(federation))
        .route("/members", get(members))
        .route("/tenants", get(tenants))
        .route("/services", get(services))
        .route("/sla", get(sla))
        .route("/alerts", get(alerts))
        .route("/ledger/blocks", get(blocks))
        .route("/ledger/verify", get(verify))
        .route("/commands", post(command))
        .route("/:name", post(named))
        .route("/policy/:name", post(policy))
        .with_state(state)
}

async fn federation(State(s): State<AppState>) -> ApiResult {
    to_json(&s.orchestrator()?.state())
}

async fn members(State(s): State<AppState>) -> ApiResult {
    let st = s.orchestrator()?.state();
    to_json(&st.members.values().collect::<Vec<_>>())
}

async fn tenants(State(s): State<AppState>) -> ApiResult {
    let st = s.orchestrator()?.state();
    to_json(&st.tenants.values().collect::<Vec<_>>())
}

async fn services(State(s): State<AppState>) -> ApiResult {
    let offers = s.orchestrator()?.services().map_err(|e| ApiError::from(SessionError::from(e)))?;
    to_json(&offers)
}

async fn sla(State(s): State<AppState>) -> ApiResult {
    let report = s.orchestrator()?.sla_report().map_err(|e| ApiError::from(SessionError::from(e)))?;
    to_json(&report)
}

#[derive(Deserialize)]
struct AlertQuery {
    #[serde(default)]
    cursor: u64,
    /// Long-poll: wait up to this long for an alert past the cursor.
    #[serde(default)]
    wait_ms: u64,
}

async fn alerts(State(s): State<AppState>, Query(q): Query<AlertQuery>) -> ApiResult {
    let feed = s.orchestrator()?.alerts().clone();
    let wait = Duration::from_millis(q.wait_ms).min(MAX_WAIT);
    let result = tokio::task::spawn_blocking(move || feed.wait_since(q.cursor, wait))
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let alerts = result.map_err(|e| ApiError::from(SessionError::from(faas_core::orchestrator::FaasError::from(e))))?;
    let next = alerts.last().map_or(q.cursor, |a| a.id);
    Ok(Json(json!({"alerts": alerts, "cursor": next})))
}

#[derive(Deserialize)]
struct Range {
    #[serde(default)]
    from: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    100
}

async fn blocks(State(s): State<AppState>, Query(r): Query<Range>) -> ApiResult {
    to_json(&s.orchestrator()?.registry().blocks_range(r.from, r.limit))
}

/// Verifies the ledger file when one is attached, else the in-memory chain.
async fn verify(State(s): State<AppState>) -> ApiResult {
    let status = match &s.ledger_path {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())))?;
            verify_ledger_bytes(&bytes)
        }
        None => s.orchestrator()?.verify_ledger(),
    };
    Ok(Json(match status {
        ChainStatus::Valid => json!({"status": "VALID"}),
        ChainStatus::Violation(i) => json!({"status": "VIOLATION", "index": i}),
    }))
}

fn execute(s: &AppState, command: Value) -> ApiResult {
    let cmd: Command = serde_json::from_value(command).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if matches!(cmd, Command::Expect(_)) {
        return Err(SessionError::NotACommand("expect").into());
    }
    let out = s.session.lock().expect("session lock").execute(&cmd)?;
    Ok(Json(out))
}

/// `{"command": name, "args": {...}}`, exactly as in a scenario line.
async fn command(State(s): State<AppState>, Json(body): Json<Value>) -> ApiResult {
    execute(&s, body)
}

/// `POST /<command>` with the command's arguments as the body.
async fn named(State(s): State<AppState>, Path(name): Path<String>, body: Option<Json<Value>>) -> ApiResult {
    let args = body.map_or(json!({}), |Json(v)| v);
    execute(&s, json!({"command": name, "args": args}))
}

/// `POST /policy/amend` and `POST /policy/admin`.
async fn policy(State(s): State<AppState>, Path(name): Path<String>, Json(args): Json<Value>) -> ApiResult {
    let command = match name.as_str() {
        "amend" => "amend-policy",
        "admin" => "admin-policy",
        other => return Err(ApiError::bad_request(format!("unknown policy action {other}"))),
    };
    execute(&s, json!({"command": command, "args": args}))
}
