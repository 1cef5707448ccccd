//! HTTP and WebSocket front for the hub.
//!
//! `/api/v1/*` is handed to the core router, `/chat?token=..&name=..` upgrades
//! to the event channel. Everything stateful lives in [`Gateway`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get};
use axum::{Json, Router};
use colloquy_core::api::{parse_query, ApiBody, ApiRequest};
use colloquy_core::clock::SystemClock;
use colloquy_core::gateway::{Delivery, Gateway, DEFAULT_QUEUE_CAPACITY};
use colloquy_core::hub::{Hub, HubConfig};
use colloquy_core::log::NdjsonMirror;
use colloquy_core::store::Store;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub unsafe_html: bool,
    pub queue_capacity: usize,
    pub ping_interval: Duration,
    /// Sessions silent for this long are reaped.
    pub idle_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 5000)),
            data_dir: None,
            unsafe_html: false,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            ping_interval: Duration::from_secs(25),
            idle_timeout: Duration::from_secs(60),
        }
    }
}

impl ServerConfig {
    pub fn ephemeral() -> Self {
        ServerConfig { bind: SocketAddr::from(([127, 0, 0, 1], 0)), ..Default::default() }
    }
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    ping_interval: Duration,
    idle_timeout: Duration,
}

pub struct RunningServer {
    pub addr: SocketAddr,
    pub admin_token: String,
    pub gateway: Arc<Gateway>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: JoinHandle<()>,
}

impl RunningServer {
    pub fn api_url(&self) -> String {
        format!("http://{}/api/v1", self.addr)
    }

    pub fn chat_url(&self) -> String {
        format!("ws://{}/chat", self.addr)
    }

    pub fn login_url(&self, token: &str, name: &str) -> String {
        let q: String = url_query(&[("token", token), ("name", name)]);
        format!("http://{}/chat?{q}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.handle.await;
    }

    /// Runs until the listener task ends.
    pub async fn wait(self) {
        let _ = self.handle.await;
    }
}

fn url_query(pairs: &[(&str, &str)]) -> String {
    let mut ser = url::form_urlencoded::Serializer::new(String::new());
    for (k, v) in pairs {
        ser.append_pair(k, v);
    }
    ser.finish()
}

pub fn open_hub(config: &ServerConfig) -> anyhow::Result<Hub> {
    let hub_config = HubConfig { unsafe_html: config.unsafe_html, ..Default::default() };
    let clock = Arc::new(SystemClock);
    match &config.data_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let store = Store::open(&dir.join("colloquy.db"))?;
            let mirror = NdjsonMirror::open(dir.join("logs"))?;
            Ok(Hub::open(store, Some(mirror), clock, hub_config)?)
        }
        None => Ok(Hub::in_memory(clock, hub_config)?),
    }
}

/// Binds, loads state and serves in the background.
pub async fn start(config: ServerConfig) -> anyhow::Result<RunningServer> {
    let listener = TcpListener::bind(config.bind).await.with_context(|| format!("binding {}", config.bind))?;
    let addr = listener.local_addr()?;
    let hub = open_hub(&config)?;
    let admin_token = hub.admin_token().0.clone();
    let gateway = Arc::new(Gateway::with_capacity(hub, config.queue_capacity));
    let state = AppState { gateway: gateway.clone(), ping_interval: config.ping_interval, idle_timeout: config.idle_timeout };
    let app = router(state);
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = serve.await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok(RunningServer { addr, admin_token, gateway, shutdown: Some(tx), handle })
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"ok": true})) }))
        .route("/chat", get(chat))
        .route("/api/v1/{*rest}", any(api))
        .with_state(state)
}

async fn api(State(state): State<AppState>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let path = uri.path().strip_prefix("/api/v1").unwrap_or(uri.path()).to_string();
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer ").or_else(|| v.strip_prefix("bearer ")))
        .map(|t| t.trim().to_string());
    let request_id = headers
        .get("x-request-id")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let req = ApiRequest {
        method: method.as_str().to_string(),
        path,
        query: uri.query().map(parse_query).unwrap_or_default(),
        bearer,
        request_id: Some(request_id.clone()),
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let gateway = state.gateway.clone();
    let resp = tokio::task::spawn_blocking(move || gateway.api(&req)).await.expect("api handler panicked");
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let rid = [("x-request-id", request_id)];
    match resp.body {
        ApiBody::Json(v) => (status, rid, Json(v)).into_response(),
        ApiBody::Text { content_type, text } => (status, rid, [(header::CONTENT_TYPE, content_type)], text).into_response(),
        ApiBody::Empty => (status, rid).into_response(),
    }
}

async fn chat(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
    ws: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Response {
    let ws = match ws {
        Ok(ws) => ws,
        Err(_) => return (StatusCode::UPGRADE_REQUIRED, "this endpoint speaks WebSocket\n").into_response(),
    };
    let token = params.get("token").cloned().unwrap_or_default();
    let name = params.get("name").cloned();
    ws.on_upgrade(move |socket| session(socket, state, token, name))
}

async fn close(mut socket: WebSocket, code: u16, reason: &str) {
    let _ = socket.send(Message::Close(Some(CloseFrame { code, reason: reason.into() }))).await;
    let _ = socket.close().await;
}

async fn session(socket: WebSocket, state: AppState, token: String, name: Option<String>) {
    let gateway = state.gateway.clone();
    let conn = match gateway.connect(&token, name.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            tracing::info!("login rejected: {e}");
            close(socket, e.close_code(), &e.to_string()).await;
            return;
        }
    };
    let session = conn.session;
    let mut rx = conn.rx;
    let mut kill = conn.kill;
    let (mut sink, mut stream) = socket.split();
    let mut ping = tokio::time::interval(state.ping_interval);
    ping.tick().await;
    let mut last_heard = tokio::time::Instant::now();
    // The kill sender is dropped when the gateway forgets the session; queued
    // frames (including a final Close) still have to drain.
    let mut kill_armed = true;

    loop {
        tokio::select! {
            biased;
            killed = &mut kill, if kill_armed => match killed {
                Ok((code, reason)) => {
                    let _ = sink.send(Message::Close(Some(CloseFrame { code, reason: reason.into() }))).await;
                    break;
                }
                Err(_) => kill_armed = false,
            },
            delivery = rx.recv() => match delivery {
                Some(Delivery::Frame(frame)) => {
                    if sink.send(Message::Text(frame.to_json().into())).await.is_err() {
                        break;
                    }
                }
                Some(Delivery::Close(code, reason)) => {
                    let _ = sink.send(Message::Close(Some(CloseFrame { code, reason: reason.into() }))).await;
                    break;
                }
                None => break,
            },
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    last_heard = tokio::time::Instant::now();
                    gateway.submit_text(session, text.as_str());
                }
                Some(Ok(Message::Binary(_))) => {
                    last_heard = tokio::time::Instant::now();
                    gateway.submit_text(session, "binary frames are not supported");
                }
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => last_heard = tokio::time::Instant::now(),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            },
            _ = ping.tick() => {
                if last_heard.elapsed() >= state.idle_timeout {
                    tracing::info!("session {session}: idle, reaping");
                    break;
                }
                if sink.send(Message::Ping(Bytes::new())).await.is_err() {
                    break;
                }
            }
        }
    }
    let _ = sink.close().await;
    gateway.disconnect(session);
}
