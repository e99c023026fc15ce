//! HTTP and WebSocket front end over [`RunManager`].
//!
//! Routes (payloads in `docs/protocol.md`):
//!
//! | method | path | body |
//! |--------|------|------|
//! | POST | `/runs` | `{scenario, seed}` |
//! | GET | `/runs` | |
//! | GET | `/runs/{id}` | |
//! | POST | `/runs/{id}/advance` | `{ticks}` or `{until}` |
//! | POST | `/runs/{id}/pause` | |
//! | POST | `/runs/{id}/resume` | |
//! | POST | `/runs/{id}/inject` | inject spec |
//! | GET | `/runs/{id}/log` | |
//! | GET/POST | `/runs/{id}/frame` | `{slices}` on POST |
//! | GET (upgrade) | `/runs/{id}/frames?stride=N&slices=...` | |

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, watch};

use immunegrid::scenario::{builtin_scenario, Axis, InjectSpec, Scenario};
use immunegrid::service::{Frame, RunHandle, RunManager, ServiceError, SliceRequest};

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<RunManager>,
    stop: watch::Receiver<bool>,
}

/// Error body: `{"error": ..., "report": ...}`.
#[derive(Debug)]
pub struct ApiError(StatusCode, String, Option<serde_json::Value>);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into(), None)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Finished(_) => StatusCode::CONFLICT,
            ServiceError::Inject(_) | ServiceError::BadStride => StatusCode::BAD_REQUEST,
            ServiceError::Stopped(_) => StatusCode::GONE,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let report = match &e {
            ServiceError::Invalid(r) => Some(serde_json::to_value(r).expect("report serializes")),
            _ => None,
        };
        ApiError(status, e.to_string(), report)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.1 });
        if let Some(r) = self.2 {
            body["report"] = r;
        }
        (self.0, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    /// Built-in name or an inline scenario document.
    pub scenario: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Advance {
    pub ticks: Option<u64>,
    pub until: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Injected {
    pub placed: u64,
    pub tick: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRequest {
    #[serde(default)]
    pub slices: Vec<SliceRequest>,
}

#[derive(Debug, Deserialize)]
pub struct StreamQuery {
    #[serde(default = "one")]
    pub stride: u64,
    /// `compartment:agent:axis:index`, separated by `;`.
    #[serde(default)]
    pub slices: String,
}

fn one() -> u64 {
    1
}

/// Parses the `slices` query value of the frame stream.
pub fn parse_slices(s: &str) -> Result<Vec<SliceRequest>, String> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let f: Vec<&str> = p.split(':').collect();
            let [compartment, agent, axis, index] = f[..] else {
                return Err(format!("slice {p:?}: expected compartment:agent:axis:index"));
            };
            let axis = match axis {
                "x" => Axis::X,
                "y" => Axis::Y,
                "z" => Axis::Z,
                _ => return Err(format!("slice {p:?}: axis must be x, y or z")),
            };
            let index = index.parse().map_err(|_| format!("slice {p:?}: bad index"))?;
            Ok(SliceRequest {
                compartment: compartment.into(),
                agent: agent.into(),
                axis,
                index,
            })
        })
        .collect()
}

async fn create_run(State(st): State<AppState>, Json(req): Json<CreateRun>) -> Result<(StatusCode, Json<RunHandle>), ApiError> {
    let scenario: Scenario = match req.scenario {
        serde_json::Value::String(name) => builtin_scenario(&name).map_err(|e| ApiError::bad_request(e.to_string()))?,
        v => serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("scenario: {e}")))?,
    };
    let m = st.manager.clone();
    let h = blocking(move || m.create_run(scenario, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(h)))
}

async fn list_runs(State(st): State<AppState>) -> ApiResult<Vec<RunHandle>> {
    let m = st.manager.clone();
    blocking(move || m.ids().iter().map(|id| m.handle(id)).collect())
        .await
        .map(Json)
}

async fn get_run(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<RunHandle> {
    let m = st.manager.clone();
    blocking(move || m.handle(&id)).await.map(Json)
}

async fn advance(State(st): State<AppState>, UrlPath(id): UrlPath<String>, Json(req): Json<Advance>) -> ApiResult<RunHandle> {
    let m = st.manager.clone();
    match (req.ticks, req.until) {
        (Some(n), None) => blocking(move || m.advance(&id, n)).await.map(Json),
        (None, Some(t)) => blocking(move || m.run_until(&id, t)).await.map(Json),
        _ => Err(ApiError::bad_request("give exactly one of ticks, until")),
    }
}

async fn pause(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<RunHandle> {
    let m = st.manager.clone();
    blocking(move || m.pause(&id)).await.map(Json)
}

async fn resume(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<RunHandle> {
    let m = st.manager.clone();
    blocking(move || m.resume(&id)).await.map(Json)
}

async fn inject(State(st): State<AppState>, UrlPath(id): UrlPath<String>, Json(spec): Json<InjectSpec>) -> ApiResult<Injected> {
    let m = st.manager.clone();
    let (placed, tick) = blocking(move || m.inject(&id, spec)).await?;
    Ok(Json(Injected { placed, tick }))
}

async fn export_log(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let m = st.manager.clone();
    let bytes = blocking(move || m.export_log(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

async fn get_frame(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Frame> {
    let m = st.manager.clone();
    blocking(move || m.snapshot(&id, Vec::new())).await.map(Json)
}

async fn post_frame(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SnapshotRequest>,
) -> ApiResult<Frame> {
    let m = st.manager.clone();
    blocking(move || m.snapshot(&id, req.slices)).await.map(Json)
}

async fn frames(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let slices = parse_slices(&q.slices).map_err(ApiError::bad_request)?;
    let m = st.manager.clone();
    let rx = blocking(move || m.subscribe(&id, q.stride, slices)).await?;
    // engine frames cross to the async side through a one-slot channel, so a
    // slow socket stalls the bridge and then the engine
    let (tx, frx) = mpsc::channel::<Frame>(1);
    std::thread::spawn(move || {
        while let Ok(f) = rx.recv() {
            if tx.blocking_send(f).is_err() {
                break;
            }
        }
    });
    let stop = st.stop.clone();
    Ok(ws.on_upgrade(move |socket| pump(socket, frx, stop)))
}

async fn pump(mut socket: WebSocket, mut frames: mpsc::Receiver<Frame>, mut stop: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            f = frames.recv() => {
                let Some(f) = f else { break };
                let text = serde_json::to_string(&f).expect("frame serializes");
                if socket.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
            _ = stop.changed() => break,
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/advance", post(advance))
        .route("/runs/{id}/pause", post(pause))
        .route("/runs/{id}/resume", post(resume))
        .route("/runs/{id}/inject", post(inject))
        .route("/runs/{id}/log", get(export_log))
        .route("/runs/{id}/frame", get(get_frame).post(post_frame))
        .route("/runs/{id}/frames", get(frames))
        .with_state(state)
}

/// Writes each log as `<dir>/<id>.ndjson`.
pub fn write_logs(dir: &Path, logs: &[(String, Vec<u8>)]) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    logs.iter()
        .map(|(id, bytes)| {
            let p = dir.join(format!("{id}.ndjson"));
            std::fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}

/// Serves until `shutdown` resolves, then stops every run and flushes its
/// log into `data_dir`. Returns the written paths.
pub async fn serve(
    listener: tokio::net::TcpListener,
    data_dir: PathBuf,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<Vec<PathBuf>> {
    let manager = Arc::new(RunManager::new());
    let (stop_tx, stop) = watch::channel(false);
    let app = router(AppState {
        manager: manager.clone(),
        stop,
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            let _ = stop_tx.send(true);
        })
        .await?;
    let logs = tokio::task::spawn_blocking(move || manager.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    let paths = write_logs(&data_dir, &logs)?;
    log::info!("flushed {} run logs to {}", paths.len(), data_dir.display());
    Ok(paths)
}

/// Resolves on ctrl-c or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

impl AppState {
    /// State for embedding the router without [`serve`]; the sender ends
    /// open frame streams.
    pub fn new(manager: Arc<RunManager>) -> (Self, watch::Sender<bool>) {
        let (tx, stop) = watch::channel(false);
        (AppState { manager, stop }, tx)
    }
}
