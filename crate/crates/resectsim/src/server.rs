//! HTTP + JSON service hosting runs, with a server-sent event stream per run.
//!
//! Routes:
//! - `POST /runs` create and start a run
//! - `GET /runs` list known runs
//! - `GET /runs/{id}` run handle
//! - `GET /runs/{id}/events?from_seq=N` event stream (SSE)
//! - `POST /runs/{id}/decision` supervisor decision
//! - `GET /runs/{id}/artifacts/{*path}` run directory files
//! - `GET /runs/{id}/surfaces/{surface_id}/grid?n=41` sampled surface heights

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Component, Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use resectsim_core::executor::{
    parse_events, run_in_dir, AutoApprove, Decision, DecisionMessage, Event, ExecError, ExecutorConfig,
    PendingRequest, RequestPayload, RunManifest, RunRecord, RunStatus, Supervisor, EVENTS_FILE,
};
use resectsim_core::phantom::PhantomSpec;
use resectsim_core::surface::PolySurface;

/// Lifecycle of a hosted run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleStatus {
    Created,
    Running,
    AwaitingDecision,
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub status: HandleStatus,
    pub current_cycle: Option<usize>,
    pub pending_request: Option<PendingRequest>,
    /// Final status reported by the executor, once finished.
    pub outcome: Option<RunStatus>,
    pub last_seq: u64,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRunRequest {
    #[serde(default)]
    pub run_id: Option<String>,
    /// Explicit phantom; when absent the default phantom varied by `seed`.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: Option<ExecutorConfig>,
    /// Headless policy instead of waiting for decisions.
    #[serde(default)]
    pub auto_approve: bool,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Live {
    status: HandleStatus,
    current_cycle: Option<usize>,
    pending: Option<PendingRequest>,
    outcome: Option<RunStatus>,
    events: Vec<Event>,
    decisions: Option<mpsc::Sender<(u64, Decision)>>,
}

struct RunEntry {
    id: String,
    dir: PathBuf,
    live: Mutex<Live>,
    tx: broadcast::Sender<Event>,
}

impl RunEntry {
    fn handle(&self) -> RunHandle {
        let l = self.live.lock().expect("run state lock");
        RunHandle {
            run_id: self.id.clone(),
            status: if l.pending.is_some() { HandleStatus::AwaitingDecision } else { l.status },
            current_cycle: l.current_cycle,
            pending_request: l.pending.clone(),
            outcome: l.outcome,
            last_seq: l.events.last().map_or(0, |e| e.seq),
        }
    }

    /// Folds one event into the live view and fans it out.
    fn observe(&self, event: &Event) {
        let mut l = self.live.lock().expect("run state lock");
        match event.kind.as_str() {
            "run_started" => l.status = HandleStatus::Running,
            "cycle_started" => l.current_cycle = event.payload["cycle"].as_u64().map(|c| c as usize),
            "supervision_requested" => {
                if let Ok(payload) = serde_json::from_value::<RequestPayload>(event.payload["request"].clone()) {
                    l.pending = Some(PendingRequest { request_seq: event.seq, payload });
                }
            }
            "supervision_resolved" => l.pending = None,
            "run_finished" => {
                let outcome: Option<RunStatus> = serde_json::from_value(event.payload["status"].clone()).ok();
                l.outcome = outcome;
                l.status = match outcome {
                    Some(RunStatus::Aborted | RunStatus::AbortedBySupervisor) | None => HandleStatus::Aborted,
                    Some(_) => HandleStatus::Completed,
                };
                l.pending = None;
                l.decisions = None;
            }
            _ => {}
        }
        l.events.push(event.clone());
        // Sent under the lock so subscribers never see events out of order.
        let _ = self.tx.send(event.clone());
    }
}

/// Waits for decisions posted through the HTTP endpoint.
struct GatewaySupervisor {
    rx: mpsc::Receiver<(u64, Decision)>,
}

impl Supervisor for GatewaySupervisor {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        loop {
            let (seq, d) = self.rx.recv().map_err(|_| ExecError::SupervisorGone)?;
            if seq == request.request_seq {
                return Ok(d);
            }
        }
    }

    fn is_human(&self) -> bool {
        true
    }
}

pub struct AppState {
    data_dir: PathBuf,
    runs: Mutex<HashMap<String, Arc<RunEntry>>>,
    next_id: Mutex<u64>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(data_dir: PathBuf) -> SharedState {
        Arc::new(AppState { data_dir, runs: Mutex::new(HashMap::new()), next_id: Mutex::new(1) })
    }

    /// In-memory entry, or one rebuilt from a run directory left by an
    /// earlier process.
    fn entry(&self, id: &str) -> ApiResult<Arc<RunEntry>> {
        if !valid_id(id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")));
        }
        if let Some(e) = self.runs.lock().expect("runs lock").get(id) {
            return Ok(e.clone());
        }
        let dir = self.data_dir.join(id);
        if !dir.join(EVENTS_FILE).is_file() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")));
        }
        let record = RunRecord::load(&dir).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let status = if record.finished() && record.status != RunStatus::Aborted && record.status != RunStatus::AbortedBySupervisor {
            HandleStatus::Completed
        } else {
            HandleStatus::Aborted
        };
        let (tx, _) = broadcast::channel(16);
        let entry = Arc::new(RunEntry {
            id: id.to_string(),
            dir,
            live: Mutex::new(Live {
                status,
                current_cycle: record.cycles.last().map(|c| c.cycle),
                pending: None,
                outcome: Some(record.status),
                events: record.events,
                decisions: None,
            }),
            tx,
        });
        self.runs.lock().expect("runs lock").entry(id.to_string()).or_insert(entry.clone());
        Ok(entry)
    }

    /// Identifier of the run currently executing, if any.
    pub fn active_run(&self) -> Option<String> {
        self.runs.lock().expect("runs lock").values().find_map(|e| {
            let l = e.live.lock().expect("run state lock");
            matches!(l.status, HandleStatus::Created | HandleStatus::Running).then(|| e.id.clone())
        })
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(stream_events))
        .route("/runs/{id}/decision", post(submit_decision))
        .route("/runs/{id}/artifacts/{*path}", get(get_artifact))
        .route("/runs/{id}/surfaces/{surface_id}/grid", get(surface_grid))
        .with_state(state)
}

async fn create_run(State(state): State<SharedState>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<RunHandle>)> {
    let req: CreateRunRequest = if body.is_empty() {
        CreateRunRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let seed = req.seed.unwrap_or(0);
    let phantom = req.phantom.unwrap_or_else(|| PhantomSpec::default().variant(seed));
    phantom.validate().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let mut config = req.config.unwrap_or_default();
    if req.seed.is_some() {
        config.seed = seed;
    }
    config.validate().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;

    let id = match req.run_id {
        Some(id) if valid_id(&id) => id,
        Some(id) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid run id {id:?}"))),
        None => loop {
            let mut n = state.next_id.lock().expect("id lock");
            let id = format!("run-{:04}", *n);
            *n += 1;
            if !state.data_dir.join(&id).exists() {
                break id;
            }
        },
    };
    let manifest = RunManifest { run_id: id.clone(), phantom, config };

    let entry = {
        let mut runs = state.runs.lock().expect("runs lock");
        if runs.contains_key(&id) || state.data_dir.join(&id).exists() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("run {id} already exists")));
        }
        let busy = runs.values().any(|e| {
            let l = e.live.lock().expect("run state lock");
            matches!(l.status, HandleStatus::Created | HandleStatus::Running)
        });
        if busy {
            return Err(ApiError::new(StatusCode::CONFLICT, "another run is active"));
        }
        let (tx, _) = broadcast::channel(1024);
        let entry = Arc::new(RunEntry {
            id: id.clone(),
            dir: state.data_dir.join(&id),
            live: Mutex::new(Live {
                status: HandleStatus::Created,
                current_cycle: None,
                pending: None,
                outcome: None,
                events: Vec::new(),
                decisions: None,
            }),
            tx,
        });
        runs.insert(id.clone(), entry.clone());
        entry
    };
    std::fs::create_dir_all(&entry.dir).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let handle = entry.handle();

    let mut supervisor: Box<dyn Supervisor + Send> = if req.auto_approve {
        Box::new(AutoApprove)
    } else {
        let (dtx, drx) = mpsc::channel();
        entry.live.lock().expect("run state lock").decisions = Some(dtx);
        Box::new(GatewaySupervisor { rx: drx })
    };
    // The worker holds the entry weakly: once the service drops it, the
    // decision sender goes with it and a waiting run aborts.
    let worker = Arc::downgrade(&entry);
    let dir = entry.dir.clone();
    drop(entry);
    tokio::task::spawn_blocking(move || {
        let observer = worker.clone();
        let listener = Box::new(move |e: &Event| {
            if let Some(entry) = observer.upgrade() {
                entry.observe(e)
            }
        });
        let result = run_in_dir(&dir, &manifest, supervisor.as_mut(), vec![listener]);
        if let (Err(e), Some(entry)) = (result, worker.upgrade()) {
            let mut l = entry.live.lock().expect("run state lock");
            l.status = HandleStatus::Aborted;
            l.outcome = Some(RunStatus::Aborted);
            l.pending = None;
            l.decisions = None;
            drop(l);
            eprintln!("run {} failed: {e}", entry.id);
        }
    });
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_runs(State(state): State<SharedState>) -> Json<Vec<RunHandle>> {
    let mut ids: Vec<String> = state.runs.lock().expect("runs lock").keys().cloned().collect();
    if let Ok(rd) = std::fs::read_dir(&state.data_dir) {
        for d in rd.flatten() {
            if let Some(name) = d.file_name().to_str() {
                if d.path().join(EVENTS_FILE).is_file() && !ids.iter().any(|i| i == name) {
                    ids.push(name.to_string());
                }
            }
        }
    }
    ids.sort();
    Json(ids.iter().filter_map(|id| state.entry(id).ok()).map(|e| e.handle()).collect())
}

async fn get_run(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunHandle>> {
    Ok(Json(state.entry(&id)?.handle()))
}

#[derive(Deserialize)]
pub struct EventsQuery {
    from_seq: Option<u64>,
}

fn to_sse(e: &Event) -> SseEvent {
    SseEvent::default()
        .id(e.seq.to_string())
        .event(e.kind.clone())
        .data(serde_json::to_string(e).expect("event serializes"))
}

/// Everything with seq greater than `from_seq` (or the `Last-Event-ID`
/// header), then live events until the run finishes.
async fn stream_events(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let entry = state.entry(&id)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let from = q.from_seq.or(last_id).unwrap_or(0);
    let (backlog, rx, finished) = {
        let l = entry.live.lock().expect("run state lock");
        let backlog: Vec<Event> = l.events.iter().filter(|e| e.seq > from).cloned().collect();
        let finished = l.events.iter().any(|e| e.kind == "run_finished")
            || matches!(l.status, HandleStatus::Completed | HandleStatus::Aborted);
        (backlog, entry.tx.subscribe(), finished)
    };
    let last_sent = backlog.last().map_or(from, |e| e.seq);
    let head = stream::iter(backlog.iter().map(to_sse).map(Ok).collect::<Vec<_>>());
    let live = stream::unfold((rx, last_sent, finished), |(mut rx, last, done)| async move {
        if done {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(e) if e.seq <= last => continue,
                Ok(e) => {
                    let done = e.kind == "run_finished";
                    let item = to_sse(&e);
                    return Some((Ok(item), (rx, e.seq, done)));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(head.chain(live)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn submit_decision(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<Value>> {
    let entry = state.entry(&id)?;
    let msg = DecisionMessage::from_json(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if msg.run_id.as_deref().is_some_and(|r| r != id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "run_id does not match the URL"));
    }
    let mut l = entry.live.lock().expect("run state lock");
    let pending = l
        .pending
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no decision is pending"))?;
    if pending.request_seq != msg.request_seq {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("stale request_seq {}; pending is {}", msg.request_seq, pending.request_seq),
        ));
    }
    // Boxes are checked against the standard overhead image.
    let decision = msg.into_decision(256, 256).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    if !decision.fits(pending.payload.kind()) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "verdict does not answer the pending request"));
    }
    let sender = l
        .decisions
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "run does not accept decisions"))?;
    sender
        .send((pending.request_seq, decision))
        .map_err(|_| ApiError::new(StatusCode::GONE, "run is no longer waiting"))?;
    l.pending = None;
    Ok(Json(json!({"accepted": true, "request_seq": pending.request_seq})))
}

fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.components().all(|c| matches!(c, Component::Normal(_))) {
        Some(root.join(rel))
    } else {
        None
    }
}

async fn get_artifact(
    State(state): State<SharedState>,
    UrlPath((id, path)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let entry = state.entry(&id)?;
    let file = safe_join(&entry.dir, &path).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid artifact path"))?;
    let bytes = tokio::fs::read(&file)
        .await
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no artifact {path}")))?;
    let content_type = match file.extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("pgm") => "image/x-portable-graymap",
        Some("pcd") | Some("csv") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

#[derive(Deserialize)]
pub struct GridQuery {
    n: Option<usize>,
}

/// Surface heights on an `n x n` grid over the fit domain.
async fn surface_grid(
    State(state): State<SharedState>,
    UrlPath((id, surface_id)): UrlPath<(String, String)>,
    Query(q): Query<GridQuery>,
) -> ApiResult<Json<Value>> {
    let entry = state.entry(&id)?;
    let n = q.n.unwrap_or(41);
    if !(2..=201).contains(&n) || !valid_id(&surface_id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "n must be in [2, 201]"));
    }
    let text = tokio::fs::read_to_string(entry.dir.join("surfaces").join(format!("{surface_id}.json")))
        .await
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no surface {surface_id}")))?;
    let s = PolySurface::from_json(&text).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let d = *s.domain();
    let axis = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect() };
    let xs = axis(d.x_min, d.x_max);
    let ys = axis(d.y_min, d.y_max);
    let z: Vec<Vec<f64>> = ys.iter().map(|&y| xs.iter().map(|&x| s.evaluate(x, y)).collect()).collect();
    Ok(Json(json!({"surface_id": surface_id, "model_id": s.model_id(), "xs": xs, "ys": ys, "z": z})))
}

/// Reads the events of a run directory without going through the service.
pub fn read_run_events(dir: &Path) -> Result<Vec<Event>, ExecError> {
    let text = std::fs::read_to_string(dir.join(EVENTS_FILE)).map_err(|e| ExecError::Io(e.to_string()))?;
    parse_events(&text)
}

pub async fn serve(data_dir: PathBuf, addr: std::net::SocketAddr) -> std::io::Result<()> {
    std::fs::create_dir_all(&data_dir)?;
    let state = AppState::new(data_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
