//! HTTP sessions in which a person answers a run's point queries.
//!
//! Each step's queries are planned before any answer is shown, so a session
//! answered exactly as the simulated oracle would produces the same point
//! sets and checkpoints as the simulated run. Answers are appended to
//! `answers.jsonl` before they are acknowledged; a restarted service reopens
//! every session from its run directory and replays them.

mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use apis_core::driver::{AnnotatorKind, Data, Experiment, ExperimentConfig, MetricsRow, Plan};
use apis_core::oracle::RemoteAnnotator;
use apis_core::synthgen::{encode_ppm, ShapeKind};
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

pub use session::{Progress, Session, SessionMeta, SessionState, ANSWERS_FILE, SESSION_FILE};
use session::AnswerError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] apis_core::Error),

    #[error("i/o failure on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error("corrupt session file {0}: {1}")]
    Corrupt(PathBuf, serde_json::Error),
}

/// An error response: status plus a JSON body naming the cause.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(apis_core::Error::Config { field, message }) => Self {
                status: StatusCode::BAD_REQUEST,
                message,
                field: Some(field),
            },
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

type Shared = Arc<Mutex<Session>>;

/// All sessions under one root directory, one run directory per session.
pub struct Service {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Shared>>,
    idempotency: Mutex<HashMap<String, String>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Service {
    /// Opens `root`, resuming every session found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Arc<Self>, ServiceError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| ServiceError::Io(root.clone(), e))?;
        let service = Self {
            root: root.clone(),
            sessions: Mutex::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
        };
        let entries = std::fs::read_dir(&root).map_err(|e| ServiceError::Io(root.clone(), e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SESSION_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let meta_path = dir.join(SESSION_FILE);
            let text = std::fs::read_to_string(&meta_path).map_err(|e| ServiceError::Io(meta_path.clone(), e))?;
            let meta: SessionMeta = serde_json::from_str(&text).map_err(|e| ServiceError::Corrupt(meta_path, e))?;
            let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(dir.join("config.json")).map_err(
                |e| ServiceError::Io(dir.join("config.json"), e),
            )?)?;
            let exp = Experiment::resume(&dir, Data::load(&cfg)?)?;
            service.insert(Session::start(meta, dir, exp)?);
        }
        Ok(Arc::new(service))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn insert(&self, session: Session) -> String {
        let id = session.meta.session_id.clone();
        if let Some(key) = &session.meta.idempotency_key {
            lock(&self.idempotency).insert(key.clone(), id.clone());
        }
        lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    pub fn session(&self, id: &str) -> Option<Shared> {
        lock(&self.sessions).get(id).cloned()
    }

    /// Validates `body`, creates the run directory and plans step 0.
    pub fn create(&self, body: &str, key: Option<String>) -> Result<String, ApiError> {
        if let Some(id) = key.as_ref().and_then(|k| lock(&self.idempotency).get(k).cloned()) {
            return Ok(id);
        }
        let cfg = ExperimentConfig::from_json(body).map_err(ServiceError::from)?;
        if cfg.annotator != AnnotatorKind::Human {
            return Err(ApiError {
                status: StatusCode::BAD_REQUEST,
                message: "human sessions only".into(),
                field: Some("annotator".into()),
            });
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        let data = Data::load(&cfg).map_err(ServiceError::from)?;
        let exp = Experiment::new(cfg, data, Some(dir.clone())).map_err(ServiceError::from)?;
        let meta = SessionMeta {
            session_id: id.clone(),
            idempotency_key: key.clone(),
        };
        let session = Session::start(meta.clone(), dir.clone(), exp)?;
        let meta_path = dir.join(SESSION_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("session meta serialization") + "\n";
        std::fs::write(&meta_path, text).map_err(|e| ServiceError::Io(meta_path, e))?;
        // A concurrent create with the same key may have won the race.
        if let Some(id) = key.as_ref().and_then(|k| lock(&self.idempotency).get(k).cloned()) {
            let _ = std::fs::remove_dir_all(&dir);
            return Ok(id);
        }
        Ok(self.insert(session))
    }
}

/// Runs the step on a blocking thread, then plans the next one.
fn spawn_training(shared: Shared, job: (Experiment, Plan, RemoteAnnotator)) {
    let (mut exp, plan, annotator) = job;
    tokio::task::spawn_blocking(move || {
        let result = exp.complete(&plan, &annotator);
        if result.is_ok() {
            lock(&shared).state = SessionState::Selecting;
        }
        let next = result.map_err(ServiceError::from).and_then(|_| session::plan_next(&exp));
        let mut s = lock(&shared);
        match next {
            Ok(plan) => {
                if let Err(e) = s.install(exp, plan) {
                    s.state = SessionState::Failed;
                    s.error = Some(e.to_string());
                }
            }
            Err(e) => {
                let e = match e {
                    ServiceError::Core(e) => e,
                    other => apis_core::Error::InvalidValue(other.to_string()),
                };
                let _ = exp.record_failure(&e);
                s.exp = Some(exp);
                s.state = SessionState::Failed;
                s.error = Some(e.to_string());
            }
        }
    });
}

#[derive(Serialize)]
struct BoxJson {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

#[derive(Serialize)]
struct Category {
    id: u8,
    name: Option<&'static str>,
}

#[derive(Serialize)]
struct QueryPayload {
    query_id: u64,
    image_id: u32,
    instance_id: u32,
    /// Base64 of a binary PPM (P6) holding the learner's exact pixels.
    image: String,
    #[serde(rename = "box")]
    bbox: BoxJson,
    point: serde_json::Value,
    category: Category,
    progress: Progress,
}

#[derive(Deserialize)]
struct AnswerBody {
    query_id: u64,
    label: i64,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(
    State(service): State<Arc<Service>>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let id = tokio::task::spawn_blocking(move || service.create(&body, key))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn next_query(State(service): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let shared = service.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let mut s = lock(&shared);
    match s.state {
        SessionState::Training | SessionState::Selecting => {
            return Err(ApiError::new(StatusCode::CONFLICT, "training"));
        }
        SessionState::Finished => return Ok(StatusCode::NO_CONTENT.into_response()),
        SessionState::Failed => {
            let msg = s.error.clone().unwrap_or_default();
            return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, msg));
        }
        SessionState::AwaitingAnswers => {}
    }
    let Some(q) = s.next_query().cloned() else {
        if let Some(job) = s.take_job() {
            drop(s);
            spawn_training(shared, job);
        }
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let exp = s.exp.as_ref().expect("awaiting sessions hold the experiment");
    let dataset = &exp.data().train.dataset;
    let record = dataset.instance(q.key()).expect("planned instances exist");
    let image = dataset.image(q.image_id).expect("planned images exist");
    let payload = QueryPayload {
        query_id: q.query_id,
        image_id: q.image_id,
        instance_id: q.instance_id,
        image: base64::engine::general_purpose::STANDARD.encode(encode_ppm(image)),
        bbox: BoxJson {
            x_min: record.bbox.x_min,
            y_min: record.bbox.y_min,
            x_max: record.bbox.x_max,
            y_max: record.bbox.y_max,
        },
        point: json!({ "x": q.x, "y": q.y }),
        category: Category {
            id: record.category_id,
            name: ShapeKind::from_category(record.category_id).map(ShapeKind::name),
        },
        progress: s.progress(),
    };
    Ok(Json(payload).into_response())
}

async fn answer(
    State(service): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<AnswerBody>,
) -> Result<Json<Progress>, ApiError> {
    let shared = service.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let mut s = lock(&shared);
    s.answer(body.query_id, body.label).map(Json).map_err(|e| match e {
        AnswerError::NotAwaiting(state) => ApiError::new(StatusCode::CONFLICT, format!("session is {state:?}")),
        AnswerError::UnknownQuery(q) => ApiError::new(StatusCode::NOT_FOUND, format!("query {q} is not pending")),
        AnswerError::AlreadyAnswered(q) => ApiError::new(StatusCode::CONFLICT, format!("query {q} already answered")),
        AnswerError::BadLabel(l) => ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("label {l} not in {{0, 1}}"),
            field: Some("label".into()),
        },
        AnswerError::Io(e) => e.into(),
    })
}

async fn metrics(
    State(service): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Vec<MetricsRow>>, ApiError> {
    let shared = service.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let rows = lock(&shared).metrics.clone();
    Ok(Json(rows))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/metrics", get(metrics))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Serves `root` on `addr` until the process ends.
pub async fn serve(root: impl Into<PathBuf>, addr: SocketAddr) -> Result<(), ServiceError> {
    let service = Service::open(root)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(addr.to_string()), e))?;
    axum::serve(listener, router(service))
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(addr.to_string()), e))
}
