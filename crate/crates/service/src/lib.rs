//! HTTP front end for human-oracle active-learning sessions.
//!
//! Every session is backed by an append-only journal in the journal
//! directory plus a small metadata file naming its dataset and embedding.
//! On startup all journals are replayed, so a killed process resumes where
//! it stopped.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use trajal_core::al::{
    initial_labels, now_ms, Evaluator, Journal, QueryRecord, Session, SessionConfig, SessionMode, SessionStatus, Strategy,
};
use trajal_core::classifiers::{ClassifierConfig, ClassifierTag};
use trajal_core::io::{read_dataset, read_embedding};
use trajal_core::trajectory::{ClassLabel, Frame, TrajId, TrajectoryStore};

/// Label string for the "other / unknown" answer.
pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Root for dataset directories and embedding files named in requests.
    pub data_dir: PathBuf,
    pub journal_dir: PathBuf,
    /// Built UI bundle, served under `/ui`.
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{message}")]
    Conflict { message: String, status: Option<SessionStatus> },
    #[error("{0}")]
    Invalid(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<SessionStatus>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (code, kind, path, status) = match &self {
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request", None, None),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None, None),
            ApiError::MissingArtifact(p) => (StatusCode::NOT_FOUND, "missing_artifact", Some(p.display().to_string()), None),
            ApiError::Conflict { status, .. } => (StatusCode::CONFLICT, "conflict", None, *status),
            ApiError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid", None, None),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None, None),
        };
        let body = ErrorBody {
            error: kind,
            message,
            path,
            status,
        };
        (code, Json(body)).into_response()
    }
}

impl From<trajal_core::Error> for ApiError {
    fn from(e: trajal_core::Error) -> Self {
        use trajal_core::Error as E;
        match e {
            E::InvalidInput(_) | E::BudgetTooLarge { .. } | E::SingleClass(_) | E::Session(_) | E::UnknownId(_) => {
                ApiError::Invalid(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn default_mode() -> SessionMode {
    SessionMode::Classification
}

/// Body of `POST /sessions`. Paths are relative to the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub session_id: String,
    /// Directory holding `trajectories.jsonl` and `manifest.json`.
    pub dataset: String,
    /// Embedding file (one JSON record per trajectory).
    pub embedding: String,
    pub strategy: Strategy,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: SessionMode,
    /// SVM with default parameters when absent.
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
}

impl CreateSession {
    pub fn session_config(&self, embedding: trajal_core::embedding::EmbeddingTag) -> SessionConfig {
        let classifier = self.classifier.clone().unwrap_or_else(|| ClassifierConfig::default_for(ClassifierTag::Svm));
        match self.mode {
            SessionMode::Classification => SessionConfig::classification(embedding, classifier, self.strategy, self.budget, self.seed),
            SessionMode::UnknownClassDiscovery => SessionConfig::discovery(embedding, classifier, self.strategy, self.budget, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub step: usize,
    pub trajectory_id: TrajId,
    pub informativeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub status: SessionStatus,
    pub mode: SessionMode,
    pub strategy: Strategy,
    /// Labels received so far.
    pub step: usize,
    pub budget: usize,
    pub budget_remaining: usize,
    pub pending: Option<PendingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPayload {
    pub session_id: String,
    pub step: usize,
    pub trajectory_id: TrajId,
    pub informativeness: f64,
    pub budget_remaining: usize,
    pub frames: Vec<Frame>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub session_id: String,
    pub metric: String,
    pub points: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub trajectory_id: TrajId,
    pub informativeness: f64,
    pub strategy: Strategy,
    pub label: String,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitLabel {
    pub step: usize,
    pub trajectory_id: TrajId,
    /// A class name, or `"Unknown"` (discovery mode only).
    pub label: String,
}

fn label_name(l: Option<ClassLabel>) -> String {
    l.map_or_else(|| UNKNOWN.to_string(), |l| l.name().to_string())
}

/// Labels an annotator may choose from.
pub fn allowed_labels(mode: SessionMode) -> Vec<String> {
    let mut v: Vec<String> = ClassLabel::ALL.iter().map(|l| l.name().to_string()).collect();
    if mode == SessionMode::UnknownClassDiscovery {
        v.push(UNKNOWN.to_string());
    }
    v
}

fn parse_label(s: &str, mode: SessionMode) -> ApiResult<Option<ClassLabel>> {
    if s == UNKNOWN {
        return match mode {
            SessionMode::UnknownClassDiscovery => Ok(None),
            SessionMode::Classification => Err(ApiError::Invalid(format!("label `{UNKNOWN}` is only accepted in discovery mode"))),
        };
    }
    s.parse::<ClassLabel>()
        .map(Some)
        .map_err(|_| ApiError::Invalid(format!("unknown label `{s}`; expected one of {:?}", allowed_labels(mode))))
}

/// Read-side view of one session, rebuilt after every mutation.
#[derive(Debug, Clone)]
struct Snapshot {
    handle: SessionHandle,
    next: Option<NextPayload>,
    metrics: MetricsView,
    log: Vec<LogEntry>,
}

impl Snapshot {
    fn of(id: &str, session: &Session, store: &TrajectoryStore) -> Snapshot {
        let cfg = session.config();
        let pending = session.pending().first().map(|p| PendingView {
            step: p.step,
            trajectory_id: p.id,
            informativeness: p.informativeness,
        });
        let handle = SessionHandle {
            session_id: id.to_string(),
            status: session.status(),
            mode: cfg.mode,
            strategy: cfg.strategy,
            step: session.log().len(),
            budget: cfg.budget,
            budget_remaining: session.budget_remaining(),
            pending: pending.clone(),
        };
        // Frames only: the stored label and variant never leave the process.
        let next = pending.and_then(|p| {
            store.get(p.trajectory_id).ok().map(|t| NextPayload {
                session_id: id.to_string(),
                step: p.step,
                trajectory_id: p.trajectory_id,
                informativeness: p.informativeness,
                budget_remaining: session.budget_remaining(),
                frames: t.frames.clone(),
                labels: allowed_labels(cfg.mode),
            })
        });
        let metric = match cfg.mode {
            SessionMode::Classification => "macro_f1",
            SessionMode::UnknownClassDiscovery => "unknown_class_count",
        };
        let metrics = MetricsView {
            session_id: id.to_string(),
            metric: metric.to_string(),
            points: session
                .metrics()
                .iter()
                .enumerate()
                .map(|(i, &value)| MetricPoint {
                    step: i * cfg.batch_size.max(1),
                    value,
                })
                .collect(),
        };
        let log = session.log().iter().map(log_entry).collect();
        Snapshot {
            handle,
            next,
            metrics,
            log,
        }
    }
}

fn log_entry(r: &QueryRecord) -> LogEntry {
    LogEntry {
        step: r.step,
        trajectory_id: r.id,
        informativeness: r.informativeness,
        strategy: r.strategy,
        label: label_name(r.label),
        wall_time_ms: r.wall_time_ms,
    }
}

struct Live {
    id: String,
    session: Session,
    journal: Journal,
    store: Arc<TrajectoryStore>,
}

impl Live {
    fn submit(&mut self, req: &SubmitLabel) -> ApiResult<()> {
        let mode = self.session.config().mode;
        let label = parse_label(&req.label, mode)?;
        let status = Some(self.session.status());
        match self.session.pending().first() {
            Some(p) if p.step == req.step => {
                if p.id != req.trajectory_id {
                    return Err(ApiError::Conflict {
                        message: format!("step {} is pending for trajectory {}, not {}", p.step, p.id, req.trajectory_id),
                        status,
                    });
                }
                self.session.submit(req.trajectory_id, label, now_ms())?;
                let events = self.session.take_events();
                self.journal.append_all(&events)?;
                Ok(())
            }
            _ => {
                // Exactly-once: an identical resubmission of an answered step
                // is acknowledged without advancing.
                match self.session.log().iter().find(|r| r.step == req.step) {
                    Some(r) if r.id == req.trajectory_id && r.label == label => Ok(()),
                    Some(r) => Err(ApiError::Conflict {
                        message: format!("step {} was already answered with {} for trajectory {}", r.step, label_name(r.label), r.id),
                        status,
                    }),
                    None => Err(ApiError::Conflict {
                        message: format!("step {} is not pending", req.step),
                        status,
                    }),
                }
            }
        }
    }
}

struct Slot {
    live: Arc<Mutex<Live>>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl Slot {
    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, s: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(s);
    }
}

pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    request: CreateSession,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Joins a request path onto the data directory, refusing anything that
/// would leave it.
fn resolve(root: &Path, rel: &str) -> ApiResult<PathBuf> {
    let p = Path::new(rel);
    if p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(ApiError::BadRequest(format!("path `{rel}` must be relative to the data directory")));
    }
    Ok(root.join(p))
}

impl AppState {
    /// Loads every journaled session found in the journal directory.
    pub fn open(config: ServiceConfig) -> std::io::Result<Arc<AppState>> {
        fs::create_dir_all(&config.journal_dir)?;
        let state = AppState {
            config,
            sessions: RwLock::new(HashMap::new()),
        };
        let mut metas: Vec<PathBuf> = fs::read_dir(&state.config.journal_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
            .collect();
        metas.sort();
        for meta in metas {
            match state.restore(&meta) {
                Ok(Some(id)) => log::info!("resumed session {id}"),
                Ok(None) => {}
                Err(e) => log::error!("cannot resume {}: {e}", meta.display()),
            }
        }
        Ok(Arc::new(state))
    }

    fn journal_path(&self, id: &str) -> PathBuf {
        self.config.journal_dir.join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.config.journal_dir.join(format!("{id}.meta.json"))
    }

    fn restore(&self, meta_path: &Path) -> ApiResult<Option<String>> {
        let meta: SessionMeta = serde_json::from_str(&fs::read_to_string(meta_path).map_err(|e| ApiError::Internal(e.to_string()))?)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let id = meta.request.session_id.clone();
        let journal = self.journal_path(&id);
        if fs::metadata(&journal).map_or(true, |m| m.len() == 0) {
            log::warn!("session {id} has no journal entries; skipping");
            return Ok(None);
        }
        let dir = resolve(&self.config.data_dir, &meta.request.dataset)?;
        let store = read_dataset(&dir).map_err(|e| ApiError::Internal(e.to_string()))?.store;
        let (session, journal) = Session::resume(&journal)?;
        self.insert(id.clone(), session, journal, Arc::new(store));
        Ok(Some(id))
    }

    fn insert(&self, id: String, session: Session, journal: Journal, store: Arc<TrajectoryStore>) {
        let snapshot = Snapshot::of(&id, &session, &store);
        let slot = Arc::new(Slot {
            live: Arc::new(Mutex::new(Live {
                id: id.clone(),
                session,
                journal,
                store,
            })),
            snapshot: RwLock::new(Arc::new(snapshot)),
        });
        self.sessions.write().expect("session table").insert(id, slot);
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session `{id}`")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.sessions.read().expect("session table").keys().cloned().collect();
        v.sort();
        v
    }

    /// Builds, journals and registers a session. Blocking (trains the
    /// initial model).
    fn create(&self, req: CreateSession) -> ApiResult<SessionHandle> {
        if !valid_session_id(&req.session_id) {
            return Err(ApiError::BadRequest("session id must be 1-64 characters of [A-Za-z0-9_-]".into()));
        }
        let id = req.session_id.clone();
        if self.sessions.read().expect("session table").contains_key(&id) {
            return Err(ApiError::Conflict {
                message: format!("session `{id}` already exists"),
                status: None,
            });
        }
        let dir = resolve(&self.config.data_dir, &req.dataset)?;
        for f in [trajal_core::io::MANIFEST_FILE, trajal_core::io::TRAJECTORY_FILE] {
            if !dir.join(f).is_file() {
                return Err(ApiError::MissingArtifact(dir.join(f)));
            }
        }
        let emb_path = resolve(&self.config.data_dir, &req.embedding)?;
        if !emb_path.is_file() {
            return Err(ApiError::MissingArtifact(emb_path));
        }
        let dataset = read_dataset(&dir).map_err(|e| ApiError::Invalid(e.to_string()))?;
        let embedding = read_embedding(&emb_path).map_err(|e| ApiError::Invalid(e.to_string()))?;
        let config = req.session_config(embedding.tag);
        let known = config.known_classes.clone();
        let visible = dataset.store.restricted_to(&known);
        let labels = initial_labels(&visible, &dataset.partition);
        let evaluator = Evaluator::from_source(&dataset.store, &dataset.partition, req.mode == SessionMode::UnknownClassDiscovery)?;

        // The metadata file doubles as the creation lock.
        let meta_path = self.meta_path(&id);
        let mut meta = match OpenOptions::new().write(true).create_new(true).open(&meta_path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(ApiError::Conflict {
                    message: format!("session `{id}` already exists"),
                    status: None,
                })
            }
            Err(e) => return Err(ApiError::Internal(e.to_string())),
        };
        let cleanup = || {
            let _ = fs::remove_file(&meta_path);
            let _ = fs::remove_file(self.journal_path(&id));
        };
        let built = (|| -> ApiResult<(Session, Journal)> {
            meta.write_all(&serde_json::to_vec_pretty(&SessionMeta { request: req.clone() }).map_err(|e| ApiError::Internal(e.to_string()))?)
                .and_then(|_| meta.sync_all())
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            let mut session = Session::new(id.clone(), config, dataset.partition.clone(), Arc::new(embedding), labels, evaluator)?;
            let mut journal = Journal::create(&self.journal_path(&id))?;
            journal.append_all(&session.take_events())?;
            Ok((session, journal))
        })();
        let (session, journal) = match built {
            Ok(v) => v,
            Err(e) => {
                cleanup();
                return Err(e);
            }
        };
        let store = Arc::new(dataset.store);
        self.insert(id.clone(), session, journal, store);
        Ok(self.slot(&id)?.snapshot().handle.clone())
    }
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let st = state.clone();
    let handle = tokio::task::spawn_blocking(move || st.create(req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionHandle>> {
    let ids = state.session_ids();
    Json(ids.iter().filter_map(|id| state.slot(id).ok()).map(|s| s.snapshot().handle.clone()).collect())
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionHandle>> {
    Ok(Json(state.slot(&id)?.snapshot().handle.clone()))
}

async fn get_next(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<NextPayload>> {
    let snap = state.slot(&id)?.snapshot();
    match (&snap.next, snap.handle.status) {
        (Some(n), SessionStatus::AwaitingLabel) => Ok(Json(n.clone())),
        (_, status) => Err(ApiError::Conflict {
            message: format!("session `{id}` is {status:?}; no query is pending"),
            status: Some(status),
        }),
    }
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SubmitLabel>,
) -> ApiResult<Json<SessionHandle>> {
    let slot = state.slot(&id)?;
    // Mutations of one session are serialized by its mutex; retraining runs
    // on the blocking pool while readers see status Retraining.
    let mut live = slot.live.clone().lock_owned().await;
    let before = slot.snapshot();
    let advancing = before.handle.pending.as_ref().is_some_and(|p| p.step == req.step && p.trajectory_id == req.trajectory_id);
    if advancing {
        let mut s = (*before).clone();
        s.handle.status = SessionStatus::Retraining;
        slot.publish(s);
    }
    let (live_back, result) = tokio::task::spawn_blocking(move || {
        let r = live.submit(&req);
        (live, r)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    slot.publish(Snapshot::of(&live_back.id, &live_back.session, &live_back.store));
    drop(live_back);
    result?;
    Ok(Json(slot.snapshot().handle.clone()))
}

async fn get_metrics(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<MetricsView>> {
    Ok(Json(state.slot(&id)?.snapshot().metrics.clone()))
}

async fn get_log(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<LogEntry>>> {
    Ok(Json(state.slot(&id)?.snapshot().log.clone()))
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(get_next))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/log", get(get_log));
    if let Some(dir) = &state.config.static_dir {
        app = app
            .nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true))
            .route("/", get(|| async { Redirect::temporary("/ui/") }));
    }
    app.with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
