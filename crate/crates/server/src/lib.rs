//! HTTP front of the psychophysics protocol engine.
//!
//! Every session owns a [`Session`] behind its own lock, so requests for one
//! observer are handled strictly in order while other sessions proceed. The
//! server never reveals correctness or trial kind before finalization.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dist_core::dataset::{DatasetManifest, MANIFEST_FILE};
use dist_core::psycho::{build_schedule, Session, SessionScore};
use dist_core::{seed, Error};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Dataset root holding `manifest.json`; also served under `/assets/`.
    pub dataset: PathBuf,
    /// Directory receiving one JSONL log per session.
    pub log_dir: PathBuf,
    /// Base seed for session ids.
    pub id_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub n_standard: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub trial_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub session_id: String,
    pub trial_index: usize,
    pub trial_count: usize,
    /// Asset URLs in display order; the keys 1, 2, 3 name these positions.
    pub images: [String; 3],
    /// A break screen follows this trial.
    pub break_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBody {
    /// 1, 2 or 3; absent or null for a timeout.
    #[serde(default)]
    pub key: Option<u8>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ack: bool,
    /// Index of the trial to fetch next; `None` once the schedule is exhausted.
    pub next_trial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Protocol(_) => StatusCode::CONFLICT,
            Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Live {
    session: Session,
    /// Trial last handed to the client and when.
    served: Option<(usize, Instant)>,
}

pub struct AppState {
    manifest: DatasetManifest,
    config: ServerConfig,
    counter: AtomicU64,
    sessions: RwLock<HashMap<String, Arc<Mutex<Live>>>>,
}

impl AppState {
    /// Loads the dataset manifest and creates the log directory.
    pub fn open(config: ServerConfig) -> dist_core::Result<Self> {
        let manifest = DatasetManifest::load(&config.dataset.join(MANIFEST_FILE))?;
        std::fs::create_dir_all(&config.log_dir).map_err(|e| Error::io(&config.log_dir, e))?;
        Ok(Self {
            manifest,
            config,
            counter: AtomicU64::new(0),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.config.log_dir.join(format!("{session_id}.jsonl"))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Live>>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let assets = ServeDir::new(state.config.dataset.clone());
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}/trial/{k}", get(get_trial))
        .route("/session/{id}/trial/{k}/response", post(submit))
        .route("/session/{id}/finalize", post(finalize))
        .nest_service("/assets", assets)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn asset_url(path: &str) -> String {
    format!("/assets/{}", path.trim_start_matches('/'))
}

fn lock(live: &Mutex<Live>) -> std::sync::MutexGuard<'_, Live> {
    live.lock().unwrap_or_else(|p| p.into_inner())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<SessionCreated> {
    let Json(req) = body?;
    let schedule = build_schedule(&state.manifest, req.n_standard, req.seed)?;
    let n = state.counter.fetch_add(1, Ordering::SeqCst);
    let id = format!("{:016x}", seed::derive(state.config.id_seed, &[n]));
    let session = Session::with_log(id.clone(), schedule, &state.log_path(&id))?;
    let trial_count = session.schedule().len();
    state
        .sessions
        .write()
        .expect("session table lock")
        .insert(id.clone(), Arc::new(Mutex::new(Live { session, served: None })));
    log::info!("session {id} created with {trial_count} trials");
    Ok(Json(SessionCreated { session_id: id, trial_count }))
}

async fn get_trial(
    State(state): State<Arc<AppState>>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
) -> ApiResult<TrialView> {
    let live = state.session(&id)?;
    let mut live = lock(&live);
    let schedule = live.session.schedule();
    if k >= schedule.len() {
        return Err(ApiError::not_found(format!("session {id} has {} trials", schedule.len())));
    }
    if live.session.is_finalized() {
        return Err(Error::Protocol(format!("session {id} is finalized")).into());
    }
    if live.session.current() != Some(k) {
        return Err(Error::Protocol(format!("trial {k} is not the current trial")).into());
    }
    let trial = &schedule.trials[k];
    let view = TrialView {
        session_id: id,
        trial_index: k,
        trial_count: schedule.len(),
        images: trial.images.each_ref().map(|p| asset_url(p)),
        break_after: schedule.is_break_after(k),
    };
    live.served = Some((k, Instant::now()));
    Ok(Json(view))
}

async fn submit(
    State(state): State<Arc<AppState>>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
    body: Result<Json<ResponseBody>, JsonRejection>,
) -> ApiResult<Ack> {
    let Json(req) = body?;
    let live = state.session(&id)?;
    let mut live = lock(&live);
    let window_ms = match live.served {
        Some((served, at)) if served == k => at.elapsed().as_secs_f64() * 1000.0,
        _ if live.session.current().is_some_and(|c| c == k) => {
            return Err(Error::Protocol(format!("trial {k} was never served")).into());
        }
        // Let the engine name the ordering problem.
        _ => f64::INFINITY,
    };
    live.session.submit_response(k, req.key, req.elapsed_ms, Some(window_ms))?;
    live.served = None;
    Ok(Json(Ack { ack: true, next_trial: live.session.current() }))
}

async fn finalize(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionScore> {
    let live = state.session(&id)?;
    let score = lock(&live).session.finalize()?;
    log::info!("session {id} finalized after {} of {} trials", score.answered, score.total_trials);
    Ok(Json(score))
}

/// Binds `addr` and serves the dataset at `dataset`.
pub async fn run(addr: &str, config: ServerConfig) -> dist_core::Result<()> {
    let state = Arc::new(AppState::open(config)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(Path::new(addr), e))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::io(Path::new(addr), e))?);
    serve(listener, state).await.map_err(|e| Error::io(Path::new(addr), e))
}
