//! HTTP API consumed by the chat front end.
//!
//! Every response body is a JSON object with a `kind` field. Errors use
//! `{"kind": "error", "error_code", "message"}`.

use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mitra_core::evalkit::{load_gold, run_eval, EvalConfig, EvalError, GoldQuery};
use mitra_core::generate::GenerateError;
use mitra_core::{Engine, PipelineError, QueryOutcome, Session, SessionError, SessionManager, SessionState};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub struct AppState {
    engine: RwLock<Arc<Engine>>,
    sessions: SessionManager,
}

impl AppState {
    pub fn new(engine: Engine, sessions: SessionManager) -> Self {
        Self {
            engine: RwLock::new(Arc::new(engine)),
            sessions,
        }
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock poisoned").clone()
    }

    /// Replaces the engine; in-flight requests finish on the old one.
    pub fn swap_engine(&self, engine: Engine) {
        *self.engine.write().expect("engine lock poisoned") = Arc::new(engine);
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "kind": "error", "error_code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

fn pipeline_error(e: &PipelineError) -> (StatusCode, &'static str) {
    use mitra_core::embed::EmbedError;
    use mitra_core::index::IndexError;
    use mitra_core::rerank::RerankError;
    match e {
        PipelineError::Embed(EmbedError::Unavailable(_))
        | PipelineError::Index(IndexError::Embed(EmbedError::Unavailable(_)))
        | PipelineError::Rerank(RerankError::Unavailable(_))
        | PipelineError::Generate(GenerateError::Unavailable(_)) => {
            (StatusCode::SERVICE_UNAVAILABLE, "model_unavailable")
        }
        PipelineError::Generate(GenerateError::Timeout(_)) => (StatusCode::GATEWAY_TIMEOUT, "model_timeout"),
        PipelineError::UnknownAnalysis(_) => (StatusCode::NOT_FOUND, "unknown_analysis"),
        PipelineError::EmptyCorpus => (StatusCode::CONFLICT, "empty_corpus"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::EmptyQuery => (StatusCode::BAD_REQUEST, "empty_query"),
            SessionError::QueryBeforeConfirmation => (StatusCode::CONFLICT, "awaiting_confirmation"),
            SessionError::NotAwaitingConfirmation => (StatusCode::CONFLICT, "not_awaiting_confirmation"),
            SessionError::EmptyCorpus => (StatusCode::CONFLICT, "empty_corpus"),
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            SessionError::Pipeline(p) => pipeline_error(p),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let (status, code) = match &e {
            EvalError::Pipeline(p) => pipeline_error(p),
            EvalError::Io(_) => (StatusCode::BAD_REQUEST, "gold_unreadable"),
            _ => (StatusCode::BAD_REQUEST, "invalid_gold"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

type ApiResult = Result<(StatusCode, Json<Value>), ApiError>;

fn ok(body: Value) -> ApiResult {
    Ok((StatusCode::OK, Json(body)))
}

fn with_session(mut body: Value, session: &Session) -> Value {
    if let Some(obj) = body.as_object_mut() {
        obj.insert("session_id".into(), json!(session.session_id));
        obj.insert("state".into(), json!(session.state.name()));
        if let Some(a) = session.state.analysis_id() {
            obj.entry("analysis_id").or_insert_with(|| json!(a));
        }
    }
    body
}

fn session_view(session: &Session) -> Value {
    with_session(json!({ "kind": "session" }), session)
}

/// Runs blocking model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(State(app): State<Arc<AppState>>) -> ApiResult {
    let handle = app.sessions.create();
    let session = handle.lock().expect("session poisoned");
    Ok((StatusCode::CREATED, Json(session_view(&session))))
}

#[derive(Deserialize)]
struct QueryBody {
    text: String,
}

async fn query(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<QueryBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let handle = app.sessions.get(&id)?;
    let engine = app.engine();
    let value = blocking(move || {
        let mut session = handle.lock().expect("session poisoned");
        let outcome = session.handle_query(&body.text, &engine)?;
        Ok(with_session(
            serde_json::to_value(outcome).expect("serializable"),
            &session,
        ))
    })
    .await?;
    ok(value)
}

#[derive(Deserialize)]
struct ConfirmBody {
    accept: bool,
}

async fn confirm(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ConfirmBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let handle = app.sessions.get(&id)?;
    let mut session = handle.lock().expect("session poisoned");
    let state = session.confirm(body.accept)?.clone();
    let reply = match state {
        SessionState::Locked { .. } => json!({ "kind": "confirmed" }),
        _ => serde_json::to_value(QueryOutcome::Rejected {
            message: "Analysis rejected. Ask again with more detail about the analysis you mean.".into(),
        })
        .expect("serializable"),
    };
    ok(with_session(reply, &session))
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let handle = app.sessions.get(&id)?;
    let mut session = handle.lock().expect("session poisoned");
    session.reset();
    ok(session_view(&session))
}

async fn analyses(State(app): State<Arc<AppState>>) -> ApiResult {
    let engine = app.engine();
    let list: Vec<Value> = engine
        .store()
        .analyses()
        .map(|a| {
            json!({
                "analysis_id": a.analysis_id,
                "title": a.title,
                "chunks": engine.store().chunks_of_analysis(&a.analysis_id).len(),
            })
        })
        .collect();
    ok(json!({ "kind": "analyses", "analyses": list }))
}

async fn health(State(app): State<Arc<AppState>>) -> ApiResult {
    let engine = app.engine();
    ok(json!({
        "kind": "health",
        "status": "ok",
        "analyses": engine.store().analysis_count(),
        "chunks": engine.store().chunk_count(),
        "sessions": app.sessions.len(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalBody {
    #[serde(default)]
    gold: Option<Vec<GoldQuery>>,
    #[serde(default)]
    gold_path: Option<PathBuf>,
    #[serde(default)]
    bm25_k: Option<usize>,
}

async fn eval_run(State(app): State<Arc<AppState>>, body: Result<Json<EvalBody>, JsonRejection>) -> ApiResult {
    let Json(body) = body?;
    let engine = app.engine();
    let value = blocking(move || {
        let gold = match (body.gold, body.gold_path) {
            (Some(g), None) => g,
            (None, Some(p)) => load_gold(&p)?,
            _ => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_request",
                    "provide exactly one of `gold` or `gold_path`",
                ))
            }
        };
        let report = run_eval(&engine, &gold, EvalConfig { bm25_k: body.bm25_k })?;
        Ok(json!({
            "kind": "eval_report",
            "precision_recall_table": report.precision_recall_table(),
            "rank_table": report.rank_table(),
            "report": report,
        }))
    })
    .await?;
    ok(value)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/query", post(query))
        .route("/v1/sessions/{id}/confirm", post(confirm))
        .route("/v1/sessions/{id}/reset", post(reset))
        .route("/v1/analyses", get(analyses))
        .route("/v1/health", get(health))
        .route("/v1/eval/run", post(eval_run))
        .fallback(not_found)
        .with_state(state)
}

/// Periodically drops idle sessions until the returned handle is aborted.
pub fn spawn_evictor(state: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let evicted = state.sessions.evict_idle(chrono::Utc::now());
            if evicted > 0 {
                tracing::info!(evicted, "dropped idle sessions");
            }
        }
    })
}

pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let evictor = spawn_evictor(state.clone(), Duration::from_secs(60));
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    evictor.abort();
    result
}
