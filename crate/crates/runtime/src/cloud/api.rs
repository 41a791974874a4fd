//! HTTP API: JSON over REST plus a server-sent event stream.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edgetwin_core::Timestamp;
use edgetwin_messaging::{command, Command};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use super::node::CloudShared;
use super::state::CloudError;

pub const DEFAULT_MAX_POINTS: usize = 1000;

impl IntoResponse for CloudError {
    fn into_response(self) -> Response {
        let status = match &self {
            CloudError::NotFound(_) => StatusCode::NOT_FOUND,
            CloudError::Invalid(_) => StatusCode::BAD_REQUEST,
            CloudError::Bus(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// Accepts `Authorization: Bearer <token>`, or `?token=<token>` for
/// clients such as browser event sources that cannot set headers.
async fn authorize(State(cloud): State<Arc<CloudShared>>, req: Request, next: Next) -> Response {
    if let Some(expected) = cloud.token() {
        let header_ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            == Some(expected);
        let query_ok = req
            .uri()
            .query()
            .is_some_and(|q| q.split('&').any(|kv| kv.strip_prefix("token=") == Some(expected)));
        if !header_ok && !query_ok {
            return (StatusCode::UNAUTHORIZED, Json(json!({ "error": "unauthorized" }))).into_response();
        }
    }
    next.run(req).await
}

async fn nodes(State(cloud): State<Arc<CloudShared>>) -> impl IntoResponse {
    Json(cloud.state().nodes())
}

async fn devices(State(cloud): State<Arc<CloudShared>>) -> impl IntoResponse {
    Json(cloud.state().devices())
}

async fn device(
    State(cloud): State<Arc<CloudShared>>,
    Path((edge, label)): Path<(String, String)>,
) -> Result<impl IntoResponse, CloudError> {
    let state = cloud.state();
    let view = state
        .device(&edge, &label)
        .ok_or_else(|| CloudError::NotFound(format!("device {edge}/{label}")))?;
    Ok(Json(view.clone()))
}

#[derive(Deserialize)]
struct SeriesQuery {
    key: String,
    t0: Option<i64>,
    t1: Option<i64>,
    max_points: Option<usize>,
}

async fn series(
    State(cloud): State<Arc<CloudShared>>,
    Query(q): Query<SeriesQuery>,
) -> Result<impl IntoResponse, CloudError> {
    let points = cloud.state().query_series(
        &q.key,
        Timestamp(q.t0.unwrap_or(i64::MIN)),
        Timestamp(q.t1.unwrap_or(i64::MAX)),
        q.max_points.unwrap_or(DEFAULT_MAX_POINTS),
    )?;
    Ok(Json(points))
}

async fn alarms(State(cloud): State<Arc<CloudShared>>) -> impl IntoResponse {
    Json(cloud.state().alarms().to_vec())
}

async fn ack_alarm(
    State(cloud): State<Arc<CloudShared>>,
    Path(id): Path<u64>,
) -> Result<impl IntoResponse, CloudError> {
    Ok(Json(cloud.state_mut().acknowledge(id)?))
}

#[derive(Deserialize)]
struct ActuateBody {
    edge: String,
    actuator: String,
    /// A verb such as `"open"` or a full command object.
    command: Value,
}

async fn actuate(
    State(cloud): State<Arc<CloudShared>>,
    Json(body): Json<ActuateBody>,
) -> Result<impl IntoResponse, CloudError> {
    let cmd: Command = match body.command {
        Value::String(verb) => command(&verb),
        Value::Object(map) => map.into_iter().collect(),
        other => return Err(CloudError::Invalid(format!("command must be a string or object, got {other}"))),
    };
    // the bus call may block on a TCP round trip
    let ack = tokio::task::spawn_blocking(move || cloud.actuate(&body.edge, &body.actuator, cmd))
        .await
        .map_err(|e| CloudError::Io(e.to_string()))??;
    Ok(Json(ack))
}

async fn stream(State(cloud): State<Arc<CloudShared>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = cloud.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let event = Event::default()
                        .event(ev.name())
                        .json_data(&ev)
                        .unwrap_or_else(|_| Event::default().comment("unserializable event"));
                    return Some((Ok(event), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("event stream subscriber lagged by {n}");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

pub fn router(cloud: Arc<CloudShared>) -> Router {
    Router::new()
        .route("/api/nodes", get(nodes))
        .route("/api/devices", get(devices))
        .route("/api/devices/{edge}/{label}", get(device))
        .route("/api/series", get(series))
        .route("/api/alarms", get(alarms))
        .route("/api/alarms/{id}/ack", post(ack_alarm))
        .route("/api/actuate", post(actuate))
        .route("/api/stream", get(stream))
        .layer(middleware::from_fn_with_state(cloud.clone(), authorize))
        .with_state(cloud)
}

/// The API served from a dedicated thread with its own runtime.
pub struct ApiServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ApiServer {
    pub fn start(addr: SocketAddr, cloud: Arc<CloudShared>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(cloud);
        let thread = std::thread::Builder::new().name("cloud-http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("http listener: {e}");
                        return;
                    }
                };
                tokio::select! {
                    r = axum::serve(listener, app) => {
                        if let Err(e) = r {
                            log::error!("http server: {e}");
                        }
                    }
                    _ = rx => {}
                }
            });
            // open event streams never finish on their own
            runtime.shutdown_timeout(Duration::from_millis(200));
        })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
