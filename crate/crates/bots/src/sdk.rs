//! Client side of the gateway protocol.
//!
//! A [`Bot`] owns one session. Frames are read by a supervisor task that keeps
//! the per-room seq cursor, resolves receipts and hands events to a single
//! dispatch task, so handlers run one at a time in arrival order. On a dropped
//! connection the supervisor reconnects with exponential backoff; the resumed
//! rooms' history is replayed through the handlers minus already-seen seqs.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use colloquy_core::api::{ApiBody, ApiRequest};
use colloquy_core::error::ErrorBody;
use colloquy_core::event::{CommandPayload, EventType, LeaveReason, LeftPayload, JoinedPayload, Scope};
use colloquy_core::gateway::{Delivery, Gateway};
use colloquy_core::hub::{AuthError, SessionId};
use colloquy_core::layout::{ElementOverride, Mutation, RenderedLayout};
use colloquy_core::model::{RoomId, UserId};
use colloquy_core::wire::{
    ClientFrame, ControlFrame, EventFrame, MemberInfo, Receipt, RoomStateFrame, ServerFrame, CLOSE_AUTH_FAILED, CLOSE_KICKED,
    CLOSE_TOKEN_EXHAUSTED,
};
use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot, watch};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::protocol::CloseFrame;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, thiserror::Error)]
pub enum SdkError {
    #[error("login refused (close code {0})")]
    Auth(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("rejected: {} ({})", .0.message, .0.code)]
    Rejected(ErrorBody),
    #[error("api returned {status}: {body}")]
    Api { status: u16, body: Value },
    #[error("not connected")]
    Closed,
    #[error("no receipt within {0:?}")]
    Timeout(Duration),
}

impl SdkError {
    /// Machine-readable code of a rejected emit or failed API call.
    pub fn code(&self) -> Option<&str> {
        match self {
            SdkError::Rejected(b) => Some(&b.code),
            SdkError::Api { body, .. } => body["error"]["code"].as_str(),
            _ => None,
        }
    }
}

/// Where the server lives.
#[derive(Clone)]
pub enum Endpoint {
    /// `chat_url` is the `ws://host/chat` address, `api_url` ends in `/api/v1`.
    Remote { chat_url: String, api_url: String },
    /// An in-process gateway. Same protocol, no sockets.
    Local(Arc<Gateway>),
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Remote { chat_url, .. } => write!(f, "Remote({chat_url})"),
            Endpoint::Local(_) => f.write_str("Local"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { base: Duration::from_millis(500), factor: 2.0, cap: Duration::from_secs(30) }
    }
}

impl Backoff {
    /// Wait before reconnect attempt `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let secs = self.base.as_secs_f64() * self.factor.powi(attempt.min(64) as i32);
        Duration::from_secs_f64(secs.min(self.cap.as_secs_f64()))
    }
}

#[derive(Debug, Clone)]
pub struct BotConfig {
    pub endpoint: Endpoint,
    pub token: String,
    pub name: Option<String>,
    pub backoff: Backoff,
    pub receipt_timeout: Duration,
    pub reconnect: bool,
}

impl BotConfig {
    pub fn new(endpoint: Endpoint, token: impl Into<String>) -> Self {
        BotConfig {
            endpoint,
            token: token.into(),
            name: None,
            backoff: Backoff::default(),
            receipt_timeout: Duration::from_secs(10),
            reconnect: true,
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Connected,
    Reconnecting,
    /// Terminal. Carries the close code that ended the session, if any.
    Closed(Option<u16>),
}

/// What the bot knows about a room it is in.
#[derive(Debug, Clone)]
pub struct RoomView {
    pub layout: RenderedLayout,
    pub members: BTreeMap<UserId, MemberInfo>,
    pub read_only: bool,
}

pub type HandlerFuture = Pin<Box<dyn Future<Output = anyhow::Result<()>> + Send>>;
type Handler = Arc<dyn Fn(Bot, EventFrame) -> HandlerFuture + Send + Sync>;

enum Incoming {
    Frame(ServerFrame),
    Closed(Option<u16>),
}

enum Link {
    Ws(mpsc::UnboundedSender<Message>),
    Local { gateway: Arc<Gateway>, session: SessionId },
}

impl Link {
    fn send(&self, frame: &ClientFrame) -> Result<(), SdkError> {
        match self {
            Link::Ws(tx) => {
                let text = serde_json::to_string(frame).expect("frames serialize");
                tx.send(Message::Text(text.into())).map_err(|_| SdkError::Closed)
            }
            Link::Local { gateway, session } => {
                gateway.submit(*session, frame.clone());
                Ok(())
            }
        }
    }

    fn close(&self) {
        match self {
            Link::Ws(tx) => {
                let _ = tx.send(Message::Close(Some(CloseFrame { code: CloseCode::Normal, reason: "".into() })));
            }
            Link::Local { gateway, session } => gateway.disconnect(*session),
        }
    }
}

#[derive(Default)]
struct Cursor {
    rooms: BTreeMap<RoomId, RoomView>,
    /// Highest seq handed to dispatch per room.
    seen: HashMap<RoomId, u64>,
}

struct Inner {
    config: BotConfig,
    me: MemberInfo,
    http: reqwest::Client,
    handlers: Mutex<Vec<(Option<EventType>, Handler)>>,
    link: Mutex<Option<Link>>,
    pending: Mutex<HashMap<String, oneshot::Sender<Receipt>>>,
    next_id: AtomicU64,
    cursor: Mutex<Cursor>,
    events: Mutex<Option<mpsc::UnboundedSender<EventFrame>>>,
    start: watch::Sender<bool>,
    status: watch::Sender<Status>,
    stopping: AtomicBool,
}

/// Cheap to clone; all clones drive the same session.
#[derive(Clone)]
pub struct Bot(Arc<Inner>);

async fn open(config: &BotConfig) -> Result<(Link, mpsc::UnboundedReceiver<Incoming>), SdkError> {
    let (in_tx, in_rx) = mpsc::unbounded_channel();
    match &config.endpoint {
        Endpoint::Local(gateway) => {
            let conn = gateway.connect(&config.token, config.name.as_deref()).map_err(|e: AuthError| SdkError::Auth(e.close_code()))?;
            let session = conn.session;
            let mut rx = conn.rx;
            let mut kill = conn.kill;
            tokio::spawn(async move {
                let mut armed = true;
                let code = loop {
                    tokio::select! {
                        biased;
                        k = &mut kill, if armed => match k {
                            Ok((code, _)) => break Some(code),
                            Err(_) => armed = false,
                        },
                        d = rx.recv() => match d {
                            Some(Delivery::Frame(f)) => {
                                if in_tx.send(Incoming::Frame(f)).is_err() {
                                    return;
                                }
                            }
                            Some(Delivery::Close(code, _)) => break Some(code),
                            None => break None,
                        },
                    }
                };
                let _ = in_tx.send(Incoming::Closed(code));
            });
            Ok((Link::Local { gateway: gateway.clone(), session }, in_rx))
        }
        Endpoint::Remote { chat_url, .. } => {
            let mut url = reqwest::Url::parse(chat_url).map_err(|e| SdkError::Transport(e.to_string()))?;
            url.query_pairs_mut().append_pair("token", &config.token);
            if let Some(name) = &config.name {
                url.query_pairs_mut().append_pair("name", name);
            }
            let (ws, _) = tokio_tungstenite::connect_async(url.as_str()).await.map_err(|e| SdkError::Transport(e.to_string()))?;
            let (mut sink, mut stream) = ws.split();
            let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
            tokio::spawn(async move {
                while let Some(m) = out_rx.recv().await {
                    let last = matches!(m, Message::Close(_));
                    if sink.send(m).await.is_err() || last {
                        break;
                    }
                }
                let _ = sink.close().await;
            });
            tokio::spawn(async move {
                let mut code = None;
                while let Some(msg) = stream.next().await {
                    match msg {
                        Ok(Message::Text(t)) => match ServerFrame::parse(t.as_str()) {
                            Ok(f) => {
                                if in_tx.send(Incoming::Frame(f)).is_err() {
                                    return;
                                }
                            }
                            Err(e) => tracing::warn!("unparseable frame: {e}"),
                        },
                        Ok(Message::Close(c)) => {
                            code = c.map(|c| u16::from(c.code));
                            break;
                        }
                        Ok(_) => {}
                        Err(_) => break,
                    }
                }
                let _ = in_tx.send(Incoming::Closed(code));
            });
            Ok((Link::Ws(out_tx), in_rx))
        }
    }
}

/// Waits for the session frame that starts every accepted login.
async fn handshake(rx: &mut mpsc::UnboundedReceiver<Incoming>) -> Result<MemberInfo, SdkError> {
    match rx.recv().await {
        Some(Incoming::Frame(ServerFrame::Control(ControlFrame::Session { user, .. }))) => Ok(user),
        Some(Incoming::Closed(Some(code))) if code == CLOSE_AUTH_FAILED || code == CLOSE_TOKEN_EXHAUSTED => Err(SdkError::Auth(code)),
        Some(Incoming::Closed(code)) => Err(SdkError::Transport(format!("closed during login ({code:?})"))),
        Some(Incoming::Frame(other)) => Err(SdkError::Transport(format!("unexpected first frame: {}", other.to_json()))),
        None => Err(SdkError::Closed),
    }
}

impl Bot {
    /// Logs in. Handlers registered before [`Bot::start`] see every event,
    /// including the bot's own `joined`.
    pub async fn connect(config: BotConfig) -> Result<Bot, SdkError> {
        let (link, mut rx) = open(&config).await?;
        let me = handshake(&mut rx).await?;
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();
        let inner = Inner {
            config,
            me,
            http: reqwest::Client::new(),
            handlers: Mutex::new(Vec::new()),
            link: Mutex::new(Some(link)),
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            cursor: Mutex::new(Cursor::default()),
            events: Mutex::new(Some(ev_tx)),
            start: watch::channel(false).0,
            status: watch::channel(Status::Connected).0,
            stopping: AtomicBool::new(false),
        };
        let bot = Bot(Arc::new(inner));
        tokio::spawn(bot.clone().dispatch(ev_rx));
        tokio::spawn(bot.clone().supervise(rx));
        Ok(bot)
    }

    pub fn me(&self) -> &MemberInfo {
        &self.0.me
    }

    pub fn id(&self) -> UserId {
        self.0.me.id
    }

    /// Registers a handler for one event type. Handlers of the same type run
    /// in registration order.
    pub fn on<F, Fut>(&self, event: EventType, f: F)
    where
        F: Fn(Bot, EventFrame) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = anyhow::Result<()>> + Send + 'static,
    {
        self.register(Some(event), f)
    }

    pub fn on_any<F, Fut>(&self, f: F)
    where
        F: Fn(Bot, EventFrame) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = anyhow::Result<()>> + Send + 'static,
    {
        self.register(None, f)
    }

    fn register<F, Fut>(&self, event: Option<EventType>, f: F)
    where
        F: Fn(Bot, EventFrame) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = anyhow::Result<()>> + Send + 'static,
    {
        let h: Handler = Arc::new(move |bot, ev| Box::pin(f(bot, ev)));
        self.0.handlers.lock().push((event, h));
    }

    /// Begins handler dispatch. Events received before this are buffered.
    pub fn start(&self) {
        self.0.start.send_replace(true);
    }

    pub fn status(&self) -> Status {
        self.0.status.borrow().clone()
    }

    /// Resolves once the bot has given up for good.
    pub async fn closed(&self) -> Option<u16> {
        let mut rx = self.0.status.subscribe();
        loop {
            if let Status::Closed(code) = &*rx.borrow_and_update() {
                return *code;
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    }

    /// Resolves once a session is up again after a drop.
    pub async fn connected(&self) {
        let mut rx = self.0.status.subscribe();
        while *rx.borrow_and_update() != Status::Connected {
            if rx.changed().await.is_err() {
                return;
            }
        }
    }

    /// Starts dispatch and runs until the session ends for good.
    pub async fn run(&self) -> Option<u16> {
        self.start();
        self.closed().await
    }

    /// Logs out and disables reconnect.
    pub fn stop(&self) {
        self.0.stopping.store(true, Ordering::SeqCst);
        if let Some(link) = self.0.link.lock().as_ref() {
            link.close();
        }
    }

    /// Drops the current connection as a network failure would. The bot
    /// reconnects according to its backoff policy.
    pub fn interrupt(&self) {
        if let Some(link) = self.0.link.lock().as_ref() {
            link.close();
        }
    }

    pub fn rooms(&self) -> Vec<RoomId> {
        self.0.cursor.lock().rooms.keys().cloned().collect()
    }

    pub fn room(&self, room: &RoomId) -> Option<RoomView> {
        self.0.cursor.lock().rooms.get(room).cloned()
    }

    pub fn members(&self, room: &RoomId) -> Vec<MemberInfo> {
        self.0.cursor.lock().rooms.get(room).map(|r| r.members.values().cloned().collect()).unwrap_or_default()
    }

    pub fn member(&self, room: &RoomId, user: UserId) -> Option<MemberInfo> {
        self.0.cursor.lock().rooms.get(room).and_then(|r| r.members.get(&user).cloned())
    }

    /// Sends a frame and waits for its receipt. A rejection comes back as
    /// [`SdkError::Rejected`]; the session stays up.
    pub async fn emit(&self, mut frame: ClientFrame) -> Result<Receipt, SdkError> {
        let id = format!("b{}", self.0.next_id.fetch_add(1, Ordering::Relaxed));
        frame.id = Some(id.clone());
        let (tx, rx) = oneshot::channel();
        self.0.pending.lock().insert(id.clone(), tx);
        let sent = match self.0.link.lock().as_ref() {
            Some(link) => link.send(&frame),
            None => Err(SdkError::Closed),
        };
        if let Err(e) = sent {
            self.0.pending.lock().remove(&id);
            return Err(e);
        }
        let limit = self.0.config.receipt_timeout;
        match tokio::time::timeout(limit, rx).await {
            Ok(Ok(r)) if r.ok => Ok(r),
            Ok(Ok(r)) => Err(SdkError::Rejected(r.error.unwrap_or(ErrorBody { code: "unknown".into(), message: "rejected".into(), path: None }))),
            Ok(Err(_)) => Err(SdkError::Closed),
            Err(_) => {
                self.0.pending.lock().remove(&id);
                Err(SdkError::Timeout(limit))
            }
        }
    }

    pub async fn say(&self, room: &RoomId, text: &str) -> Result<Receipt, SdkError> {
        self.emit(ClientFrame::new(EventType::TextMessage, room, json!({ "text": text }))).await
    }

    pub async fn whisper(&self, room: &RoomId, to: UserId, text: &str) -> Result<Receipt, SdkError> {
        self.emit(ClientFrame::new(EventType::TextMessage, room, json!({ "text": text })).to(to)).await
    }

    /// Text shown to humans as written by `as_user`.
    pub async fn say_as(&self, room: &RoomId, as_user: UserId, to: Option<UserId>, text: &str) -> Result<Receipt, SdkError> {
        let mut f = ClientFrame::new(EventType::TextMessage, room, json!({ "text": text, "as_user": as_user }));
        f.to = to;
        self.emit(f).await
    }

    pub async fn command(&self, room: &RoomId, line: &str) -> Result<Receipt, SdkError> {
        let cmd = parse_command_line(line).unwrap_or(CommandPayload { command: line.to_string(), args: vec![] });
        self.emit(ClientFrame::new(EventType::Command, room, serde_json::to_value(cmd).expect("payload"))).await
    }

    pub async fn display(&self, room: &RoomId, element: &str, mutation: Mutation, scope: Scope) -> Result<Receipt, SdkError> {
        let mut payload = serde_json::to_value(ElementOverride { element: element.into(), mutation }).expect("payload");
        payload["scope"] = serde_json::to_value(scope).expect("scope");
        self.emit(ClientFrame::new(EventType::DisplayUpdate, room, payload)).await
    }

    pub async fn issue_code(&self, room: &RoomId, to: UserId, code: &str, reason: Option<&str>) -> Result<Receipt, SdkError> {
        let mut payload = json!({ "code": code });
        if let Some(r) = reason {
            payload["reason"] = json!(r);
        }
        self.emit(ClientFrame::new(EventType::CodeIssued, room, payload).to(to)).await
    }

    /// Calls the REST surface with the bot's token. `path` is relative to
    /// `/api/v1`.
    pub async fn api(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Value, SdkError> {
        let (status, value) = match &self.0.config.endpoint {
            Endpoint::Local(gateway) => {
                let mut req = ApiRequest::new(method, path).bearer(&self.0.config.token);
                if let Some(b) = body {
                    req = req.json(b);
                }
                let resp = gateway.api(&req);
                let value = match resp.body {
                    ApiBody::Json(v) => v,
                    ApiBody::Text { text, .. } => Value::String(text),
                    ApiBody::Empty => Value::Null,
                };
                (resp.status, value)
            }
            Endpoint::Remote { api_url, .. } => {
                let m = reqwest::Method::from_bytes(method.as_bytes()).map_err(|e| SdkError::Transport(e.to_string()))?;
                let url = format!("{}{path}", api_url.trim_end_matches('/'));
                let mut req = self.0.http.request(m, url).bearer_auth(&self.0.config.token);
                if let Some(b) = body {
                    req = req.json(b);
                }
                let resp = req.send().await.map_err(|e| SdkError::Transport(e.to_string()))?;
                let status = resp.status().as_u16();
                let text = resp.text().await.map_err(|e| SdkError::Transport(e.to_string()))?;
                let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
                (status, value)
            }
        };
        if status >= 400 {
            return Err(SdkError::Api { status, body: value });
        }
        Ok(value)
    }

    async fn dispatch(self, mut rx: mpsc::UnboundedReceiver<EventFrame>) {
        let mut start = self.0.start.subscribe();
        while !*start.borrow_and_update() {
            if start.changed().await.is_err() {
                return;
            }
        }
        while let Some(ev) = rx.recv().await {
            let handlers: Vec<Handler> = self
                .0
                .handlers
                .lock()
                .iter()
                .filter(|(t, _)| t.is_none_or(|t| t == ev.event_type))
                .map(|(_, h)| h.clone())
                .collect();
            for h in handlers {
                if let Err(e) = h(self.clone(), ev.clone()).await {
                    tracing::warn!(bot = %self.0.me.name, event = ev.event_type.as_str(), seq = ev.seq, "handler failed: {e:#}");
                }
            }
        }
    }

    fn forward(&self, ev: EventFrame) {
        if let Some(tx) = self.0.events.lock().as_ref() {
            let _ = tx.send(ev);
        }
    }

    fn on_room_state(&self, rs: RoomStateFrame) {
        let mut replay = Vec::new();
        {
            let mut cur = self.0.cursor.lock();
            let seen = cur.seen.get(&rs.room).copied();
            if let Some(seen) = seen {
                replay.extend(rs.history.iter().filter(|e| e.seq > seen).cloned());
            }
            let high = seen.unwrap_or(0).max(rs.last_seq);
            cur.seen.insert(rs.room.clone(), high);
            let members = rs.members.into_iter().map(|m| (m.id, m)).collect();
            cur.rooms.insert(rs.room, RoomView { layout: rs.layout, members, read_only: rs.read_only });
        }
        for ev in replay {
            self.forward(ev);
        }
    }

    fn on_event(&self, ev: EventFrame) {
        {
            let mut cur = self.0.cursor.lock();
            let seen = cur.seen.entry(ev.room.clone()).or_insert(0);
            if ev.seq <= *seen {
                return;
            }
            *seen = ev.seq;
            match ev.event_type {
                EventType::Joined => {
                    if let Ok(p) = serde_json::from_value::<JoinedPayload>(ev.payload.clone()) {
                        if let Some(room) = cur.rooms.get_mut(&ev.room) {
                            room.members.insert(p.user, MemberInfo { id: p.user, name: p.name, kind: p.kind });
                        }
                    }
                }
                EventType::Left => {
                    if let Ok(p) = serde_json::from_value::<LeftPayload>(ev.payload.clone()) {
                        if p.user == self.0.me.id && p.reason != LeaveReason::Disconnected {
                            // A later join starts a fresh cursor for this room.
                            cur.rooms.remove(&ev.room);
                            cur.seen.remove(&ev.room);
                        } else if let Some(room) = cur.rooms.get_mut(&ev.room) {
                            room.members.remove(&p.user);
                        }
                    }
                }
                EventType::RoomClosed => {
                    if let Some(room) = cur.rooms.get_mut(&ev.room) {
                        room.read_only = true;
                    }
                }
                EventType::DisplayUpdate => {
                    if let (Some(room), Ok(ov)) = (cur.rooms.get_mut(&ev.room), serde_json::from_value::<ElementOverride>(ev.payload.clone())) {
                        // Scope was already applied by the server: we only see what is ours.
                        room.layout.apply(&ov);
                    }
                }
                _ => {}
            }
        }
        self.forward(ev);
    }

    /// Handles frames until the connection ends; returns its close code.
    async fn pump(&self, rx: &mut mpsc::UnboundedReceiver<Incoming>) -> Option<u16> {
        while let Some(msg) = rx.recv().await {
            match msg {
                Incoming::Frame(ServerFrame::Event(ev)) => self.on_event(ev),
                Incoming::Frame(ServerFrame::Control(ControlFrame::RoomState(rs))) => self.on_room_state(rs),
                Incoming::Frame(ServerFrame::Control(ControlFrame::Receipt(r))) => {
                    if let Some(tx) = r.id.as_ref().and_then(|id| self.0.pending.lock().remove(id)) {
                        let _ = tx.send(r);
                    }
                }
                Incoming::Frame(ServerFrame::Control(ControlFrame::Session { .. })) => {}
                Incoming::Closed(code) => return code,
            }
        }
        None
    }

    fn finish(&self, code: Option<u16>) {
        *self.0.link.lock() = None;
        self.0.events.lock().take();
        self.0.status.send_replace(Status::Closed(code));
    }

    async fn supervise(self, mut rx: mpsc::UnboundedReceiver<Incoming>) {
        loop {
            let code = self.pump(&mut rx).await;
            *self.0.link.lock() = None;
            self.0.pending.lock().clear();
            let give_up = self.0.stopping.load(Ordering::SeqCst) || !self.0.config.reconnect || code == Some(CLOSE_KICKED);
            if give_up {
                self.finish(code);
                return;
            }
            tracing::info!(bot = %self.0.me.name, ?code, "connection lost, reconnecting");
            self.0.status.send_replace(Status::Reconnecting);
            let mut attempt = 0;
            rx = loop {
                tokio::time::sleep(self.0.config.backoff.delay(attempt)).await;
                attempt += 1;
                if self.0.stopping.load(Ordering::SeqCst) {
                    self.finish(code);
                    return;
                }
                let (link, mut next) = match open(&self.0.config).await {
                    Ok(x) => x,
                    Err(SdkError::Auth(c)) => {
                        self.finish(Some(c));
                        return;
                    }
                    Err(e) => {
                        tracing::debug!("reconnect attempt {attempt} failed: {e}");
                        continue;
                    }
                };
                match handshake(&mut next).await {
                    Ok(_) => {
                        *self.0.link.lock() = Some(link);
                        break next;
                    }
                    Err(SdkError::Auth(c)) => {
                        self.finish(Some(c));
                        return;
                    }
                    Err(_) => continue,
                }
            };
            self.0.status.send_replace(Status::Connected);
        }
    }
}

/// Splits `/name arg arg` into a command payload. `None` unless the line
/// starts with `/` followed by a name.
pub fn parse_command_line(line: &str) -> Option<CommandPayload> {
    let rest = line.trim().strip_prefix('/')?;
    let mut words = rest.split_whitespace();
    let command = words.next()?.to_string();
    Some(CommandPayload { command, args: words.map(str::to_string).collect() })
}

/// Text after the command name, whitespace preserved.
pub fn command_rest(line: &str) -> Option<&str> {
    let rest = line.trim_start().strip_prefix('/')?;
    let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
    Some(rest[end..].trim())
}
