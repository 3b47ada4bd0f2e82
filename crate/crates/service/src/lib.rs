//! Human-in-the-loop planning service over HTTP/JSON.
//!
//! Patients and sessions are one JSON file each under the data directory and
//! feedback is an append-only log. The engine (world, geometry config and the
//! Approach A model) is loaded once and never mutated by a request.

pub mod error;
pub mod feedback;
pub mod layout;
pub mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use latentdose_core::cohort::ingest_with_bounds;
use latentdose_core::{AlphaVector, DoseVector, LandmarkSet, MetricVector, PatientRecord, K_REGIONS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ApiResult, ErrorEnvelope};
pub use feedback::{FeedbackLog, FeedbackRecord};
pub use layout::{DataDir, Engine};
pub use session::{Adjustment, HistoryEntry, Origin, PlanningSession};

pub const API_VERSION: u32 = 1;

pub const ENV_BIND: &str = "LATENTDOSE_BIND";
pub const ENV_DATA_DIR: &str = "LATENTDOSE_DATA_DIR";
pub const ENV_MODEL: &str = "LATENTDOSE_MODEL";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    /// Approach A model file; defaults to `models/approach_a.json` in the data directory.
    pub model_path: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, String> {
        let bind = std::env::var(ENV_BIND).unwrap_or_else(|_| "127.0.0.1:8080".into());
        let bind = bind.parse().map_err(|e| format!("{ENV_BIND}={bind}: {e}"))?;
        let data_dir = std::env::var(ENV_DATA_DIR).unwrap_or_else(|_| "data".into()).into();
        let model_path = std::env::var_os(ENV_MODEL).map(PathBuf::from);
        Ok(ServiceConfig { bind, data_dir, model_path })
    }
}

type Shared<T> = Arc<Mutex<T>>;

struct Inner {
    dir: DataDir,
    engine: Engine,
    patients: RwLock<BTreeMap<String, Arc<PatientRecord>>>,
    sessions: RwLock<BTreeMap<String, Shared<PlanningSession>>>,
    feedback: Mutex<FeedbackLog>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Loads existing patients, sessions and feedback from `dir`.
    pub fn open(dir: DataDir, engine: Engine) -> latentdose_core::Result<Self> {
        let mut patients = BTreeMap::new();
        if dir.records().is_dir() {
            for r in ingest_with_bounds(&dir.records(), &engine.bounds)? {
                patients.insert(r.patient_id.clone(), Arc::new(r));
            }
        }
        let mut sessions = BTreeMap::new();
        if dir.sessions().is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(dir.sessions())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for f in files {
                let text = std::fs::read_to_string(&f)?;
                let s: PlanningSession = serde_json::from_str(&text)
                    .map_err(|e| latentdose_core::Error::Format(format!("{}: {e}", f.display())))?;
                if s.version != session::SESSION_VERSION {
                    return Err(latentdose_core::Error::Format(format!(
                        "{}: unsupported session version {}",
                        f.display(),
                        s.version
                    )));
                }
                sessions.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        let feedback = FeedbackLog::open(&dir.feedback_log())?;
        Ok(AppState {
            inner: Arc::new(Inner {
                dir,
                engine,
                patients: RwLock::new(patients),
                sessions: RwLock::new(sessions),
                feedback: Mutex::new(feedback),
            }),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/patients", post(create_patient))
        .route("/patients/{id}", get(get_patient))
        .route("/patients/{id}/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/adjust", post(adjust))
        .route("/sessions/{id}/simulate", post(simulate))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/feedback", post(session_feedback))
        .route("/feedback", get(list_feedback).post(feedback))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> Result<(), String> {
    let dir = DataDir::new(&cfg.data_dir);
    let engine = Engine::load(&dir, cfg.model_path.as_deref()).map_err(|e| e.to_string())?;
    let state = AppState::open(dir, engine).map_err(|e| e.to_string())?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await.map_err(|e| format!("{}: {e}", cfg.bind))?;
    axum::serve(listener, router(state)).await.map_err(|e| e.to_string())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.iter().all(|b| b.is_ascii_whitespace()) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("malformed body: {e}"), None))
}

fn check_version(v: Option<u32>) -> ApiResult<()> {
    match v {
        None | Some(API_VERSION) => Ok(()),
        Some(other) => Err(ApiError::bad_request(
            format!("unsupported payload version {other} (expected {API_VERSION})"),
            Some("version".into()),
        )),
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn lookup_session(inner: &Inner, id: &str) -> ApiResult<Shared<PlanningSession>> {
    inner
        .sessions
        .read()
        .expect("session index lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("session", id))
}

fn persist(inner: &Inner, s: &PlanningSession) -> ApiResult<()> {
    let json = serde_json::to_vec_pretty(s).expect("session serializes");
    layout::write_atomic(&inner.dir.session(&s.session_id), &json)?;
    Ok(())
}

fn require_model(inner: &Inner) -> ApiResult<()> {
    if inner.engine.model_a.is_none() {
        return Err(ApiError::conflict("no_model", "no trained Approach A model is loaded"));
    }
    Ok(())
}

fn require_open(s: &PlanningSession) -> ApiResult<()> {
    if s.closed.is_some() {
        return Err(ApiError::conflict("session_closed", format!("session '{}' is closed", s.session_id)));
    }
    Ok(())
}

#[derive(Serialize)]
struct Health {
    version: u32,
    world: String,
    model_loaded: bool,
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    let e = &st.inner.engine;
    Json(Health { version: API_VERSION, world: e.world_id.clone(), model_loaded: e.model_a.is_some() })
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub version: u32,
    pub patient_id: String,
}

async fn create_patient(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8", None))?;
    let record = PatientRecord::from_json(text, "body", &st.inner.engine.bounds)?;
    if !valid_id(&record.patient_id) {
        return Err(ApiError::bad_request(
            "patient_id may only contain ASCII letters, digits, '-' and '_' (at most 64)",
            Some("patient_id".into()),
        ));
    }
    let inner = st.inner.clone();
    blocking(move || {
        let mut patients = inner.patients.write().expect("patient index lock");
        let id = record.patient_id.clone();
        if patients.contains_key(&id) || inner.dir.record(&id).exists() {
            return Err(ApiError::conflict("duplicate", format!("patient '{id}' already exists")));
        }
        layout::write_atomic(&inner.dir.record(&id), record.to_json().as_bytes())?;
        patients.insert(id.clone(), Arc::new(record));
        Ok((StatusCode::CREATED, Json(Created { version: API_VERSION, patient_id: id })))
    })
    .await
}

async fn get_patient(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let rec = st.inner.patients.read().expect("patient index lock").get(&id).cloned();
    let rec = rec.ok_or_else(|| ApiError::not_found("patient", &id))?;
    Ok(Json(serde_json::from_str(&rec.to_json()).expect("record JSON parses")))
}

/// Session plus the decoded face and metrics of its current intensities.
#[derive(Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: PlanningSession,
    pub metrics: MetricVector,
    pub landmarks: LandmarkSet,
}

fn view(inner: &Inner, s: &PlanningSession) -> ApiResult<SessionView> {
    let post = s.render(&inner.engine)?;
    Ok(SessionView { session: s.clone(), metrics: post.metrics, landmarks: post.landmarks })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSessionRequest {
    version: Option<u32>,
    expression: Option<String>,
    dose: Option<Vec<f64>>,
}

async fn create_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateSessionRequest = parse(&body)?;
    check_version(req.version)?;
    let record = st.inner.patients.read().expect("patient index lock").get(&id).cloned();
    let record = record.ok_or_else(|| ApiError::not_found("patient", &id))?;
    require_model(&st.inner)?;
    let inner = st.inner.clone();
    let dose = match req.dose {
        Some(d) => DoseVector::checked(d, &inner.engine.bounds)?,
        None => DoseVector::zeros(),
    };
    blocking(move || {
        let sid = uuid::Uuid::new_v4().to_string();
        let s = PlanningSession::create(sid.clone(), &record, req.expression.as_deref(), dose, &inner.engine, Utc::now())?;
        persist(&inner, &s)?;
        let v = view(&inner, &s)?;
        inner.sessions.write().expect("session index lock").insert(sid, Arc::new(Mutex::new(s)));
        Ok((StatusCode::CREATED, Json(v)))
    })
    .await
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let inner = st.inner.clone();
    blocking(move || {
        let s = lookup_session(&inner, &id)?;
        let s = s.lock().expect("session lock").clone();
        Ok(Json(view(&inner, &s)?))
    })
    .await
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let inner = st.inner.clone();
    blocking(move || {
        let s = lookup_session(&inner, &id)?;
        let mut s = s.lock().expect("session lock");
        if s.closed.is_none() {
            let at = Utc::now().max(s.history.last().map_or(s.created, |h| h.timestamp));
            s.closed = Some(at);
            persist(&inner, &s)?;
        }
        Ok(Json(view(&inner, &s)?))
    })
    .await
}

/// Accepts `{"alpha": [...]}` or a bare array.
#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaBody {
    Bare(Vec<f64>),
    Wrapped {
        version: Option<u32>,
        alpha: Vec<f64>,
    },
}

fn checked_alpha(values: Vec<f64>) -> ApiResult<AlphaVector> {
    let arr: [f64; K_REGIONS] = values.try_into().map_err(|v: Vec<f64>| {
        ApiError::unprocessable(format!("expected {K_REGIONS} intensities, got {}", v.len()), Some("alpha".into()))
    })?;
    Ok(AlphaVector::checked(arr)?)
}

#[derive(Serialize, Deserialize)]
pub struct AdjustResponse {
    pub version: u32,
    #[serde(flatten)]
    pub adjustment: Adjustment,
}

async fn adjust(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<AdjustResponse>> {
    let s = lookup_session(&st.inner, &id)?;
    let values = match parse::<AlphaBody>(&body)? {
        AlphaBody::Bare(v) => v,
        AlphaBody::Wrapped { version, alpha } => {
            check_version(version)?;
            alpha
        }
    };
    let alpha = checked_alpha(values)?;
    require_model(&st.inner)?;
    let inner = st.inner.clone();
    blocking(move || {
        let mut s = s.lock().expect("session lock");
        require_open(&s)?;
        let adjustment = s.adjust(alpha, &inner.engine, Utc::now())?;
        persist(&inner, &s)?;
        Ok(Json(AdjustResponse { version: API_VERSION, adjustment }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DoseBody {
    Bare(Vec<f64>),
    Wrapped {
        version: Option<u32>,
        dose: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
pub struct SimulateResponse {
    pub version: u32,
    pub alpha: AlphaVector,
    pub metrics: MetricVector,
    pub landmarks: LandmarkSet,
}

async fn simulate(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SimulateResponse>> {
    let s = lookup_session(&st.inner, &id)?;
    let values = match parse::<DoseBody>(&body)? {
        DoseBody::Bare(v) => v,
        DoseBody::Wrapped { version, dose } => {
            check_version(version)?;
            dose
        }
    };
    let dose = DoseVector::checked(values, &st.inner.engine.bounds)?;
    require_model(&st.inner)?;
    let inner = st.inner.clone();
    blocking(move || {
        let mut s = s.lock().expect("session lock");
        require_open(&s)?;
        let post = s.simulate(dose, &inner.engine, Utc::now())?;
        persist(&inner, &s)?;
        Ok(Json(SimulateResponse {
            version: API_VERSION,
            alpha: post.alpha,
            metrics: post.metrics,
            landmarks: post.landmarks,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    version: Option<u32>,
    id: Option<String>,
    session_id: Option<String>,
    u_new: Vec<f64>,
    outcome: MetricVector,
    accepted: bool,
    note: Option<String>,
    timestamp: Option<DateTime<Utc>>,
}

async fn record_feedback(st: AppState, session_id: String, req: FeedbackRequest) -> ApiResult<(StatusCode, Json<FeedbackRecord>)> {
    check_version(req.version)?;
    if let Some(id) = &req.id {
        if !valid_id(id) {
            return Err(ApiError::bad_request("feedback id may only contain ASCII letters, digits, '-' and '_'", Some("id".into())));
        }
    }
    let u_new = DoseVector::checked(req.u_new, &st.inner.engine.bounds).map_err(|e| match e {
        latentdose_core::Error::OutOfBounds { field, message } => {
            ApiError::unprocessable(message, Some(field.replacen("dose", "u_new", 1)))
        }
        other => other.into(),
    })?;
    if !req.outcome.is_valid() {
        return Err(ApiError::unprocessable("outcome metrics must be finite and non-negative", Some("outcome".into())));
    }
    let session = lookup_session(&st.inner, &session_id)?;
    let inner = st.inner.clone();
    blocking(move || {
        let late = session.lock().expect("session lock").closed.is_some();
        let mut log = inner.feedback.lock().expect("feedback lock");
        if let Some(existing) = req.id.as_deref().and_then(|id| log.find(&session_id, id)) {
            return Ok((StatusCode::OK, Json(existing.clone())));
        }
        let received = Utc::now();
        let record = FeedbackRecord {
            version: feedback::FEEDBACK_VERSION,
            id: req.id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            session_id,
            u_new,
            outcome: req.outcome,
            accepted: req.accepted,
            note: req.note,
            timestamp: req.timestamp.unwrap_or(received),
            received,
            late,
        };
        log.append(record.clone())?;
        Ok((StatusCode::CREATED, Json(record)))
    })
    .await
}

async fn session_feedback(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<FeedbackRecord>)> {
    let req: FeedbackRequest = parse(&body)?;
    if req.session_id.as_deref().is_some_and(|s| s != id) {
        return Err(ApiError::bad_request("session_id in the body differs from the path", Some("session_id".into())));
    }
    record_feedback(st, id, req).await
}

async fn feedback(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<FeedbackRecord>)> {
    let req: FeedbackRequest = parse(&body)?;
    let id = req
        .session_id
        .clone()
        .ok_or_else(|| ApiError::bad_request("missing field `session_id`", Some("session_id".into())))?;
    record_feedback(st, id, req).await
}

#[derive(Deserialize)]
struct FeedbackQuery {
    session_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct FeedbackList {
    pub version: u32,
    pub records: Vec<FeedbackRecord>,
}

async fn list_feedback(State(st): State<AppState>, Query(q): Query<FeedbackQuery>) -> Json<FeedbackList> {
    let log = st.inner.feedback.lock().expect("feedback lock");
    let records = log
        .records()
        .iter()
        .filter(|r| q.session_id.as_deref().map_or(true, |s| r.session_id == s))
        .cloned()
        .collect();
    Json(FeedbackList { version: API_VERSION, records })
}
