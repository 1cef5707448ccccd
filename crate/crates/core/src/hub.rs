//! The server state machine.
//!
//! Every gateway frame and API call runs to completion under the caller's
//! lock. Effects on connections come back as [`Outgoing`] values in the order
//! they must be delivered. An event is written to the store (and mirror)
//! before it is applied in memory or sent to anyone.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock::Clock;
use crate::delivery::{recipients, MemberView, RoomView};
use crate::error::{Error, Result};
use crate::event::*;
use crate::layout::{render, DisplayState, LayoutDocument, ParseOptions, RenderedLayout};
use crate::log::{EventLog, NdjsonMirror};
use crate::model::*;
use crate::replay::{ReplayState, RoomSummary, ScopedDisplay};
use crate::store::{AuditEntry, Store};
use crate::wire::*;

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub unsafe_html: bool,
    pub max_text_bytes: usize,
    /// Keystroke events accepted per user per second.
    pub keystroke_rate: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig { unsafe_html: false, max_text_bytes: 16 * 1024, keystroke_rate: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Frame { session: SessionId, frame: ServerFrame },
    Close { session: SessionId, code: u16, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("unknown token")]
    UnknownToken,
    #[error("token revoked")]
    Revoked,
    #[error("token has no uses left")]
    Exhausted,
}

impl AuthError {
    pub fn close_code(self) -> u16 {
        match self {
            AuthError::Exhausted => CLOSE_TOKEN_EXHAUSTED,
            _ => CLOSE_AUTH_FAILED,
        }
    }
}

/// Caller identity for API operations.
#[derive(Debug, Clone)]
pub struct ApiContext {
    pub token: TokenId,
    pub request_id: Option<String>,
}

impl ApiContext {
    pub fn new(token: impl Into<String>) -> Self {
        ApiContext { token: TokenId(token.into()), request_id: None }
    }
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewToken {
    #[serde(default)]
    pub permissions: PermissionSet,
    #[serde(default)]
    pub login_room_id: Option<RoomId>,
    #[serde(default)]
    pub task_id: Option<TaskId>,
    #[serde(default = "one")]
    pub uses: u32,
    #[serde(default)]
    pub kind: UserKind,
    #[serde(default = "yes")]
    pub visible_in_roster: bool,
}

impl NewToken {
    pub fn new(permissions: impl Into<PermissionSet>, login_room: Option<&str>) -> Self {
        NewToken {
            permissions: permissions.into(),
            login_room_id: login_room.map(RoomId::from),
            task_id: None,
            uses: 1,
            kind: UserKind::Human,
            visible_in_roster: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewTask {
    pub name: String,
    pub num_users: u32,
    #[serde(default)]
    pub layout_id: Option<LayoutId>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewRoom {
    #[serde(default)]
    pub id: Option<RoomId>,
    #[serde(default)]
    pub layout_id: Option<LayoutId>,
    #[serde(default)]
    pub task_id: Option<TaskId>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionPatch {
    #[serde(default)]
    pub add: PermissionSet,
    #[serde(default)]
    pub remove: PermissionSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomInfo {
    #[serde(flatten)]
    pub room: Room,
    pub last_seq: u64,
}

/// Batch of entities created atomically: everything validates or nothing is applied.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle {
    #[serde(default)]
    pub layouts: BTreeMap<String, Value>,
    #[serde(default)]
    pub rooms: Vec<BundleRoom>,
    #[serde(default)]
    pub tasks: Vec<BundleTask>,
    #[serde(default)]
    pub tokens: Vec<BundleTokens>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRoom {
    pub id: RoomId,
    #[serde(default)]
    pub layout: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleTask {
    pub name: String,
    pub num_users: u32,
    #[serde(default)]
    pub layout: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleTokens {
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default)]
    pub permissions: PermissionSet,
    #[serde(default)]
    pub login_room: Option<RoomId>,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default = "one")]
    pub uses: u32,
    #[serde(default)]
    pub kind: UserKind,
    #[serde(default = "yes")]
    pub visible_in_roster: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleResult {
    pub layouts: BTreeMap<String, LayoutId>,
    pub rooms: Vec<RoomId>,
    pub tasks: BTreeMap<String, TaskId>,
    pub tokens: Vec<Token>,
}

/// Everything the server knows, sorted by id. Two hubs holding the same
/// state export identical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateExport {
    pub tokens: Vec<Token>,
    pub layouts: BTreeMap<LayoutId, String>,
    pub tasks: Vec<Task>,
    pub rooms: Vec<Room>,
    pub users: Vec<User>,
    pub logs: BTreeMap<RoomId, Vec<LogEntry>>,
}

struct StoredLayout {
    source: String,
    doc: LayoutDocument,
}

struct RoomRuntime {
    room: Room,
    ord: u64,
    display: ScopedDisplay,
    typing: BTreeSet<UserId>,
}

struct Draft {
    room: RoomId,
    actor: Option<UserId>,
    displayed_actor: Option<UserId>,
    event_type: EventType,
    receiver: Option<UserId>,
    payload: Value,
    request_id: Option<String>,
}

impl Draft {
    fn server(room: &RoomId, event_type: EventType, payload: Value, request_id: Option<String>) -> Self {
        Draft { room: room.clone(), actor: None, displayed_actor: None, event_type, receiver: None, payload, request_id }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payloads serialize")
}

fn parse_payload<T: for<'de> Deserialize<'de>>(payload: &Value) -> Result<T> {
    serde_json::from_value(payload.clone()).map_err(|e| Error::validation("payload", e.to_string()))
}

fn valid_room_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

const HUMAN_HISTORY: [EventType; 4] =
    [EventType::TextMessage, EventType::ImageMessage, EventType::BoundingBox, EventType::CodeIssued];

pub struct Hub {
    clock: Arc<dyn Clock>,
    config: HubConfig,
    store: Store,
    mirror: Option<NdjsonMirror>,
    tokens: BTreeMap<TokenId, Token>,
    layouts: BTreeMap<LayoutId, StoredLayout>,
    default_layout: LayoutDocument,
    tasks: BTreeMap<TaskId, Task>,
    rooms: BTreeMap<RoomId, RoomRuntime>,
    users: BTreeMap<UserId, User>,
    user_by_token: HashMap<TokenId, UserId>,
    sessions: HashMap<SessionId, UserId>,
    session_of: HashMap<UserId, SessionId>,
    keystrokes: HashMap<UserId, VecDeque<i64>>,
    log: EventLog,
    audit: Vec<AuditEntry>,
    next_layout: u64,
    next_task: u64,
    next_user: u64,
    next_session: u64,
    next_ord: u64,
    next_auto_room: u64,
    admin_token: TokenId,
}

impl Hub {
    /// Loads persisted state, closes sessions that were open when the process
    /// died and mints the admin token on first start.
    pub fn open(store: Store, mirror: Option<NdjsonMirror>, clock: Arc<dyn Clock>, config: HubConfig) -> Result<Self> {
        let snap = store.load()?;
        let mut hub = Hub {
            clock,
            config,
            store,
            mirror,
            tokens: BTreeMap::new(),
            layouts: BTreeMap::new(),
            default_layout: LayoutDocument::default_chat(),
            tasks: BTreeMap::new(),
            rooms: BTreeMap::new(),
            users: BTreeMap::new(),
            user_by_token: HashMap::new(),
            sessions: HashMap::new(),
            session_of: HashMap::new(),
            keystrokes: HashMap::new(),
            log: EventLog::new(),
            audit: snap.audit,
            next_layout: 1,
            next_task: 1,
            next_user: 1,
            next_session: 1,
            next_ord: 0,
            next_auto_room: 1,
            admin_token: TokenId(String::new()),
        };

        for t in snap.tokens {
            hub.tokens.insert(t.id.clone(), t);
        }
        for (id, source) in snap.layouts {
            let doc = LayoutDocument::parse_str(&source, ParseOptions { unsafe_html: true })?;
            hub.next_layout = hub.next_layout.max(id.0 + 1);
            hub.layouts.insert(id, StoredLayout { source, doc });
        }
        for t in snap.tasks {
            hub.next_task = hub.next_task.max(t.id.0 + 1);
            hub.tasks.insert(t.id, t);
        }
        for room in snap.rooms {
            let ord = hub.next_ord;
            hub.next_ord += 1;
            hub.log.create_room(&room.id);
            hub.rooms.insert(room.id.clone(), RoomRuntime { room, ord, display: Default::default(), typing: Default::default() });
        }
        for u in snap.users {
            hub.next_user = hub.next_user.max(u.id.0 + 1);
            hub.user_by_token.insert(u.token_id.clone(), u.id);
            hub.users.insert(u.id, u);
        }
        for entry in snap.events {
            hub.fold_loaded(&entry)?;
            hub.log.append(entry)?;
        }

        // Anyone still in a room had a session when the process stopped.
        let dangling: Vec<(UserId, RoomId)> =
            hub.users.values().flat_map(|u| u.rooms.iter().map(move |r| (u.id, r.clone()))).collect();
        let mut discard = Vec::new();
        let mut resume: BTreeMap<UserId, BTreeSet<RoomId>> = BTreeMap::new();
        for (user, room) in dangling {
            hub.leave_internal(user, &room, LeaveReason::Disconnected, None, &mut discard)?;
            resume.entry(user).or_default().insert(room);
        }
        for (user, rooms) in resume {
            let u = hub.users.get_mut(&user).expect("dangling user exists");
            u.resume_rooms = rooms;
            hub.store.put_user(u)?;
        }
        if let Some(m) = hub.mirror.as_mut() {
            for (room, entries) in hub.log.rooms() {
                m.rewrite(room, entries)?;
            }
        }

        hub.admin_token = match hub.store.get_meta("admin_token")? {
            Some(id) if hub.tokens.contains_key(&TokenId(id.clone())) => TokenId(id),
            _ => {
                let token = Token {
                    id: TokenId::generate(),
                    permissions: PermissionSet::all(),
                    task_id: None,
                    login_room_id: None,
                    uses_remaining: u32::MAX,
                    revoked: false,
                    kind: UserKind::Bot,
                    visible_in_roster: false,
                };
                hub.store.put_token(&token)?;
                hub.store.set_meta("admin_token", &token.id.0)?;
                let id = token.id.clone();
                hub.tokens.insert(id.clone(), token);
                id
            }
        };
        Ok(hub)
    }

    pub fn in_memory(clock: Arc<dyn Clock>, config: HubConfig) -> Result<Self> {
        Hub::open(Store::in_memory()?, None, clock, config)
    }

    fn fold_loaded(&mut self, entry: &LogEntry) -> Result<()> {
        let rt = self.rooms.get_mut(&entry.room).ok_or_else(|| Error::not_found("room", &entry.room))?;
        match entry.event_type {
            EventType::Joined => {
                if let Some(p) = entry.payload_as::<JoinedPayload>() {
                    rt.room.members.insert(p.user);
                    if let Some(u) = self.users.get_mut(&p.user) {
                        u.rooms.insert(entry.room.clone());
                    }
                }
            }
            EventType::Left => {
                if let Some(p) = entry.payload_as::<LeftPayload>() {
                    rt.room.members.remove(&p.user);
                    rt.typing.remove(&p.user);
                    if let Some(u) = self.users.get_mut(&p.user) {
                        u.rooms.remove(&entry.room);
                    }
                }
            }
            EventType::TypingStarted => {
                rt.typing.extend(entry.actor);
            }
            EventType::TypingStopped => {
                if let Some(a) = entry.actor {
                    rt.typing.remove(&a);
                }
            }
            EventType::DisplayUpdate => {
                if let Some(p) = entry.payload_as::<DisplayUpdatePayload>() {
                    rt.display.apply(p.scope, &p.change);
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn admin_token(&self) -> &TokenId {
        &self.admin_token
    }

    pub fn now(&self) -> Timestamp {
        Timestamp(self.clock.now_ms())
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn token(&self, id: &TokenId) -> Option<&Token> {
        self.tokens.get(id)
    }

    pub fn user(&self, id: UserId) -> Option<&User> {
        self.users.get(&id)
    }

    pub fn user_for_token(&self, id: &TokenId) -> Option<UserId> {
        self.user_by_token.get(id).copied()
    }

    pub fn room(&self, id: &RoomId) -> Option<&Room> {
        self.rooms.get(id).map(|r| &r.room)
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    pub fn typing(&self, room: &RoomId) -> BTreeSet<UserId> {
        self.rooms.get(room).map(|r| r.typing.clone()).unwrap_or_default()
    }

    pub fn session_of(&self, user: UserId) -> Option<SessionId> {
        self.session_of.get(&user).copied()
    }

    pub fn permissions_of(&self, user: UserId) -> PermissionSet {
        self.users.get(&user).map_or(PermissionSet::empty(), |u| self.perms(u))
    }

    fn perms(&self, user: &User) -> PermissionSet {
        match self.tokens.get(&user.token_id) {
            Some(t) if !t.revoked => t.permissions,
            _ => PermissionSet::empty(),
        }
    }

    fn layout_of(&self, room: &Room) -> &LayoutDocument {
        room.layout_id.and_then(|id| self.layouts.get(&id)).map_or(&self.default_layout, |l| &l.doc)
    }

    fn view(&self, rt: &RoomRuntime) -> RoomView {
        let members = rt
            .room
            .members
            .iter()
            .filter_map(|id| {
                self.users.get(id).map(|u| {
                    (*id, MemberView { kind: u.kind, permissions: self.perms(u), visible_in_roster: u.visible_in_roster })
                })
            })
            .collect();
        RoomView { members, relay_bot: rt.room.relay_bot_id }
    }

    fn parse_opts(&self) -> ParseOptions {
        ParseOptions { unsafe_html: self.config.unsafe_html }
    }

    /// Persists, appends and routes one event.
    fn commit(&mut self, draft: Draft, out: &mut Vec<Outgoing>) -> Result<LogEntry> {
        let rt = self.rooms.get(&draft.room).ok_or_else(|| Error::not_found("room", &draft.room))?;
        let last = self.log.last_time(&draft.room).unwrap_or(i64::MIN);
        let entry = LogEntry {
            seq: self.log.next_seq(&draft.room),
            room: draft.room,
            time: Timestamp(self.clock.now_ms().max(last)),
            actor: draft.actor,
            displayed_actor: draft.displayed_actor,
            event_type: draft.event_type,
            receiver: draft.receiver,
            payload: draft.payload,
            request_id: draft.request_id,
        };
        let view = self.view(rt);
        self.store.append_event(&entry)?;
        if let Some(m) = self.mirror.as_mut() {
            if let Err(e) = m.append(&entry) {
                tracing::warn!("ndjson mirror: {e}");
            }
        }
        self.log.append(entry.clone())?;
        for user in recipients(&entry, &view) {
            if let (Some(session), Some(u)) = (self.session_of.get(&user), self.users.get(&user)) {
                out.push(Outgoing::Frame { session: *session, frame: ServerFrame::Event(EventFrame::for_recipient(&entry, u.kind)) });
            }
        }
        Ok(entry)
    }

    fn members_for(&self, rt: &RoomRuntime, viewer: UserKind) -> Vec<MemberInfo> {
        rt.room
            .members
            .iter()
            .filter_map(|id| self.users.get(id))
            .filter(|u| viewer == UserKind::Bot || u.visible_in_roster)
            .map(|u| MemberInfo { id: u.id, name: u.display_name.clone(), kind: u.kind })
            .collect()
    }

    /// History as `user` is entitled to see it, replaying relay changes so
    /// intercepted messages stay hidden.
    fn history_for(&self, rt: &RoomRuntime, user: &User) -> Vec<EventFrame> {
        let mut view = self.view(rt);
        view.relay_bot = None;
        let entries = self.log.entries(&rt.room.id).unwrap_or_default();
        let mut out = Vec::new();
        for e in entries {
            if let Some(PermissionUpdatePayload::Relay { relay_bot }) =
                (e.event_type == EventType::PermissionUpdate).then(|| e.payload_as()).flatten()
            {
                view.relay_bot = relay_bot;
            }
            if user.kind == UserKind::Human && !HUMAN_HISTORY.contains(&e.event_type) {
                continue;
            }
            if recipients(e, &view).contains(&user.id) {
                out.push(EventFrame::for_recipient(e, user.kind));
            }
        }
        out
    }

    pub fn render_for(&self, room: &RoomId, user: UserId) -> Option<RenderedLayout> {
        let rt = self.rooms.get(room)?;
        Some(self.render_rt(rt, user))
    }

    fn render_rt(&self, rt: &RoomRuntime, user: UserId) -> RenderedLayout {
        let mut r = render(self.layout_of(&rt.room), rt.display.for_user(user));
        if self.permissions_of(user).contains(Permission::VideoSubscribe) {
            r.video_session = rt.room.video_session.clone();
        }
        r
    }

    fn room_state(&self, rt: &RoomRuntime, user: &User) -> RoomStateFrame {
        RoomStateFrame {
            room: rt.room.id.clone(),
            layout: self.render_rt(rt, user.id),
            history: self.history_for(rt, user),
            members: self.members_for(rt, user.kind),
            read_only: rt.room.read_only,
            last_seq: self.log.next_seq(&rt.room.id) - 1,
        }
    }

    fn join_internal(&mut self, user_id: UserId, room_id: &RoomId, request_id: Option<String>, out: &mut Vec<Outgoing>) -> Result<()> {
        let user = self.users.get(&user_id).ok_or_else(|| Error::not_found("user", user_id))?;
        if !self.rooms.contains_key(room_id) {
            return Err(Error::not_found("room", room_id));
        }
        if user.rooms.contains(room_id) {
            return Ok(());
        }
        if can_join(user, room_id) == Admission::Deny {
            return Err(Error::Membership(format!("user {user_id} is already in a room")));
        }
        let token = self.tokens.get(&user.token_id);
        let payload = JoinedPayload {
            user: user_id,
            name: user.display_name.clone(),
            kind: user.kind,
            permissions: self.perms(user),
            task: token.and_then(|t| t.task_id),
            visible_in_roster: user.visible_in_roster,
        };
        self.rooms.get_mut(room_id).expect("checked").room.members.insert(user_id);
        self.users.get_mut(&user_id).expect("checked").rooms.insert(room_id.clone());

        // State first, then the join itself, so a client's seq tracking stays contiguous.
        if let Some(session) = self.session_of.get(&user_id).copied() {
            let rt = &self.rooms[room_id];
            let state = self.room_state(rt, &self.users[&user_id]);
            out.push(Outgoing::Frame { session, frame: ServerFrame::Control(ControlFrame::RoomState(state)) });
        }
        let result = self.commit(Draft::server(room_id, EventType::Joined, to_value(&payload), request_id), out);
        if let Err(e) = result {
            self.rooms.get_mut(room_id).expect("checked").room.members.remove(&user_id);
            self.users.get_mut(&user_id).expect("checked").rooms.remove(room_id);
            return Err(e);
        }
        Ok(())
    }

    fn leave_internal(
        &mut self,
        user_id: UserId,
        room_id: &RoomId,
        reason: LeaveReason,
        request_id: Option<String>,
        out: &mut Vec<Outgoing>,
    ) -> Result<()> {
        let rt = self.rooms.get(room_id).ok_or_else(|| Error::not_found("room", room_id))?;
        if !rt.room.members.contains(&user_id) {
            return Err(Error::Membership(format!("user {user_id} is not in room `{room_id}`")));
        }
        if rt.typing.contains(&user_id) {
            let mut d = Draft::server(room_id, EventType::TypingStopped, to_value(&TypingPayload { synthetic: true }), request_id.clone());
            d.actor = Some(user_id);
            self.commit(d, out)?;
            self.rooms.get_mut(room_id).expect("checked").typing.remove(&user_id);
        }
        self.commit(Draft::server(room_id, EventType::Left, to_value(&LeftPayload { user: user_id, reason }), request_id), out)?;
        self.rooms.get_mut(room_id).expect("checked").room.members.remove(&user_id);
        if let Some(u) = self.users.get_mut(&user_id) {
            u.rooms.remove(room_id);
        }
        Ok(())
    }

    // ---- sessions ----

    /// Opens a session. Consumes one token use. A user reconnecting with the
    /// same token gets the same identity; any older session is closed.
    pub fn authenticate(&mut self, token: &str, name: Option<&str>, out: &mut Vec<Outgoing>) -> Result<(SessionId, UserId), AuthError> {
        let id = TokenId(token.to_string());
        let tok = self.tokens.get(&id).ok_or(AuthError::UnknownToken)?;
        if tok.revoked {
            return Err(AuthError::Revoked);
        }
        if tok.uses_remaining == 0 {
            return Err(AuthError::Exhausted);
        }
        let mut tok = tok.clone();
        tok.uses_remaining -= 1;
        if self.store.put_token(&tok).is_err() {
            return Err(AuthError::UnknownToken);
        }
        let name = name.map(str::trim).filter(|n| !n.is_empty());

        let user_id = match self.user_by_token.get(&id).copied() {
            Some(uid) => {
                if let Some(old) = self.session_of.get(&uid).copied() {
                    out.push(Outgoing::Close { session: old, code: CLOSE_KICKED, reason: "superseded by a new session".into() });
                    let _ = self.end_session(uid, out);
                }
                if let Some(n) = name {
                    self.users.get_mut(&uid).expect("indexed").display_name = n.to_string();
                }
                uid
            }
            None => {
                let uid = UserId(self.next_user);
                self.next_user += 1;
                let user = User {
                    id: uid,
                    display_name: name.map(str::to_string).unwrap_or_else(|| format!("user-{}", uid.0)),
                    kind: tok.kind,
                    token_id: id.clone(),
                    rooms: BTreeSet::new(),
                    connected: false,
                    resume_rooms: BTreeSet::new(),
                    visible_in_roster: tok.visible_in_roster,
                };
                self.user_by_token.insert(id.clone(), uid);
                self.users.insert(uid, user);
                uid
            }
        };
        self.tokens.insert(id, tok.clone());

        let session = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(session, user_id);
        self.session_of.insert(user_id, session);
        let user = self.users.get_mut(&user_id).expect("created above");
        user.connected = true;
        let resume = std::mem::take(&mut user.resume_rooms);
        let info = MemberInfo { id: user_id, name: user.display_name.clone(), kind: user.kind };
        let _ = self.store.put_user(user);
        out.push(Outgoing::Frame {
            session,
            frame: ServerFrame::Control(ControlFrame::Session { session_id: session.to_string(), user: info }),
        });

        let mut targets: Vec<RoomId> = resume.into_iter().filter(|r| self.rooms.contains_key(r)).collect();
        if targets.is_empty() {
            targets.extend(tok.login_room_id.clone().filter(|r| self.rooms.contains_key(r)));
        }
        for room in targets {
            if let Err(e) = self.join_internal(user_id, &room, None, out) {
                tracing::warn!("rejoin of {room} by {user_id} failed: {e}");
            }
        }
        Ok((session, user_id))
    }

    /// Transport went away. Stale sessions (already superseded) are ignored.
    pub fn disconnect(&mut self, session: SessionId, out: &mut Vec<Outgoing>) {
        if let Some(user) = self.sessions.get(&session).copied() {
            if let Err(e) = self.end_session(user, out) {
                tracing::warn!("ending session {session}: {e}");
            }
        }
    }

    fn end_session(&mut self, user_id: UserId, out: &mut Vec<Outgoing>) -> Result<()> {
        if let Some(s) = self.session_of.remove(&user_id) {
            self.sessions.remove(&s);
        }
        let rooms: Vec<RoomId> = self.users.get(&user_id).map(|u| u.rooms.iter().cloned().collect()).unwrap_or_default();
        let mut result = Ok(());
        for room in &rooms {
            if let Err(e) = self.leave_internal(user_id, room, LeaveReason::Disconnected, None, out) {
                result = Err(e);
            }
        }
        self.keystrokes.remove(&user_id);
        if let Some(u) = self.users.get_mut(&user_id) {
            u.connected = false;
            u.resume_rooms = rooms.into_iter().collect();
            self.store.put_user(u)?;
        }
        result
    }

    fn kick(&mut self, user_id: UserId, reason: &str, out: &mut Vec<Outgoing>) -> Result<()> {
        if let Some(session) = self.session_of.get(&user_id).copied() {
            self.end_session(user_id, out)?;
            out.push(Outgoing::Close { session, code: CLOSE_KICKED, reason: reason.into() });
        }
        Ok(())
    }

    /// Handles one client frame and pushes its receipt after any event frames.
    pub fn submit(&mut self, session: SessionId, frame: ClientFrame, out: &mut Vec<Outgoing>) {
        let id = frame.id.clone();
        let room = frame.room.clone();
        let receipt = match self.handle_frame(session, frame, out) {
            Ok(seq) => Receipt { id, ok: true, room: Some(room), seq: Some(seq), error: None },
            Err(e) => Receipt { id, ok: false, room: Some(room), seq: None, error: Some(e.body()) },
        };
        out.push(Outgoing::Frame { session, frame: ServerFrame::Control(ControlFrame::Receipt(receipt)) });
    }

    /// Like [`Hub::submit`] for raw text; malformed frames get a failed receipt.
    pub fn submit_text(&mut self, session: SessionId, text: &str, out: &mut Vec<Outgoing>) {
        match serde_json::from_str::<ClientFrame>(text) {
            Ok(frame) => self.submit(session, frame, out),
            Err(e) => {
                let id = serde_json::from_str::<Value>(text)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string));
                let err = Error::validation("$", format!("malformed frame: {e}"));
                let receipt = Receipt { id, ok: false, room: None, seq: None, error: Some(err.body()) };
                out.push(Outgoing::Frame { session, frame: ServerFrame::Control(ControlFrame::Receipt(receipt)) });
            }
        }
    }

    fn handle_frame(&mut self, session: SessionId, frame: ClientFrame, out: &mut Vec<Outgoing>) -> Result<u64> {
        let user_id = *self.sessions.get(&session).ok_or_else(|| Error::Unauthenticated("session closed".into()))?;
        let et = EventType::parse(&frame.event_type)
            .ok_or_else(|| Error::validation("type", format!("unknown event type `{}`", frame.event_type)))?;
        if !et.client_emittable() {
            return Err(Error::validation("type", format!("`{}` is emitted by the server only", et.as_str())));
        }
        let rt = self.rooms.get(&frame.room).ok_or_else(|| Error::not_found("room", &frame.room))?;
        if !rt.room.members.contains(&user_id) {
            return Err(Error::Membership(format!("not a member of room `{}`", frame.room)));
        }
        let user = &self.users[&user_id];
        let perms = self.perms(user);
        let require = |p: Permission| if perms.contains(p) { Ok(()) } else { Err(Error::PermissionDenied(p)) };
        let member = |u: UserId| {
            if rt.room.members.contains(&u) {
                Ok(())
            } else {
                Err(Error::Membership(format!("user {u} is not in room `{}`", frame.room)))
            }
        };
        let no_receiver = || match frame.to {
            Some(_) => Err(Error::validation("to", format!("`{}` cannot be addressed to one user", et.as_str()))),
            None => Ok(()),
        };
        let read_only = || if rt.room.read_only { Err(Error::ReadOnly(frame.room.to_string())) } else { Ok(()) };
        let max = self.config.max_text_bytes;
        let check_len = |path: &str, s: &str| {
            if s.len() > max {
                Err(Error::validation(path, format!("exceeds {max} bytes")))
            } else {
                Ok(())
            }
        };

        let mut draft = Draft {
            room: frame.room.clone(),
            actor: Some(user_id),
            displayed_actor: None,
            event_type: et,
            receiver: None,
            payload: Value::Null,
            request_id: frame.id.clone(),
        };
        let mut display_change = None;
        let mut typing_change = None;

        match et {
            EventType::TextMessage => {
                let p: TextPayload = parse_payload(&frame.payload)?;
                if let Some(shown) = p.as_user {
                    if user.kind != UserKind::Bot {
                        return Err(Error::PermissionDenied(Permission::SendImpersonated));
                    }
                    require(Permission::SendImpersonated)?;
                    member(shown)?;
                    draft.displayed_actor = Some(shown);
                } else {
                    require(Permission::SendText)?;
                }
                if let Some(to) = frame.to {
                    require(Permission::SendPrivate)?;
                    member(to)?;
                    draft.receiver = Some(to);
                }
                read_only()?;
                if p.text.trim().is_empty() {
                    return Err(Error::validation("payload.text", "empty message"));
                }
                check_len("payload.text", &p.text)?;
                draft.payload = json!({ "text": p.text });
            }
            EventType::ImageMessage => {
                require(Permission::SendImage)?;
                no_receiver()?;
                read_only()?;
                let p: ImagePayload = parse_payload(&frame.payload)?;
                check_len("payload.url", &p.url)?;
                match url::Url::parse(&p.url) {
                    Ok(u) if matches!(u.scheme(), "http" | "https") => {}
                    _ => return Err(Error::validation("payload.url", "expected an http(s) URL")),
                }
                draft.payload = to_value(&p);
            }
            EventType::Command => {
                require(Permission::SendCommand)?;
                no_receiver()?;
                read_only()?;
                let mut p: CommandPayload = parse_payload(&frame.payload)?;
                p.command = p.command.trim().trim_start_matches('/').to_string();
                if p.command.is_empty() || p.command.contains(char::is_whitespace) {
                    return Err(Error::validation("payload.command", "expected a single command name"));
                }
                check_len("payload", &frame.payload.to_string())?;
                draft.payload = to_value(&p);
            }
            EventType::TypingStarted | EventType::TypingStopped => {
                require(Permission::TypingEvents)?;
                no_receiver()?;
                read_only()?;
                let p: TypingPayload = parse_payload(&frame.payload)?;
                if p.synthetic {
                    return Err(Error::validation("payload.synthetic", "reserved for the server"));
                }
                draft.payload = json!({});
                typing_change = Some(et == EventType::TypingStarted);
            }
            EventType::Keystroke => {
                require(Permission::LiveTyping)?;
                no_receiver()?;
                read_only()?;
                let p: KeystrokePayload = parse_payload(&frame.payload)?;
                check_len("payload.text", &p.text)?;
                let now = self.clock.now_ms();
                let window = self.keystrokes.entry(user_id).or_default();
                while window.front().is_some_and(|t| *t <= now - 1000) {
                    window.pop_front();
                }
                if window.len() >= self.config.keystroke_rate {
                    return Err(Error::RateLimited(format!("at most {} keystroke events per second", self.config.keystroke_rate)));
                }
                window.push_back(now);
                draft.payload = to_value(&p);
            }
            EventType::BoundingBox => {
                require(Permission::Annotate)?;
                no_receiver()?;
                read_only()?;
                let p: BoundingBoxPayload = parse_payload(&frame.payload)?;
                if self.layout_of(&rt.room).element(&p.element_id).is_none() {
                    return Err(Error::validation("payload.element_id", format!("unknown element `{}`", p.element_id)));
                }
                draft.payload = to_value(&p.normalized());
            }
            EventType::Mouse => {
                require(Permission::Annotate)?;
                no_receiver()?;
                read_only()?;
                let p: MousePayload = parse_payload(&frame.payload)?;
                if self.layout_of(&rt.room).element(&p.element_id).is_none() {
                    return Err(Error::validation("payload.element_id", format!("unknown element `{}`", p.element_id)));
                }
                draft.payload = to_value(&p);
            }
            EventType::DisplayUpdate => {
                require(Permission::LayoutModify)?;
                no_receiver()?;
                if frame.payload.get("video_session").is_some() {
                    return Err(Error::validation("payload.video_session", "attach video sessions through the API"));
                }
                let p: DisplayUpdatePayload = parse_payload(&frame.payload)?;
                self.layout_of(&rt.room).check_mutation(&p.change.element, &p.change.mutation, self.parse_opts())?;
                if let Scope::User(u) = p.scope {
                    member(u)?;
                }
                if let crate::layout::Mutation::SetText(t) | crate::layout::Mutation::SetImageSrc(t) = &p.change.mutation {
                    check_len("payload.value", t)?;
                }
                draft.payload = to_value(&p);
                display_change = Some(p);
            }
            EventType::CodeIssued => {
                require(Permission::SendPrivate)?;
                let to = frame.to.ok_or_else(|| Error::validation("to", "a code needs a recipient"))?;
                member(to)?;
                let p: CodeIssuedPayload = parse_payload(&frame.payload)?;
                if p.code.is_empty() || p.code.len() > 64 {
                    return Err(Error::validation("payload.code", "expected 1 to 64 characters"));
                }
                draft.receiver = Some(to);
                draft.payload = to_value(&p);
            }
            EventType::Joined | EventType::Left | EventType::PermissionUpdate | EventType::RoomCreated | EventType::RoomClosed => {
                unreachable!("filtered by client_emittable")
            }
        }

        let entry = self.commit(draft, out)?;
        let rt = self.rooms.get_mut(&entry.room).expect("room exists");
        if let Some(p) = display_change {
            rt.display.apply(p.scope, &p.change);
        }
        match typing_change {
            Some(true) => {
                rt.typing.insert(user_id);
            }
            Some(false) => {
                rt.typing.remove(&user_id);
            }
            None => {}
        }
        Ok(entry.seq)
    }

    // ---- API operations ----

    fn caller(&self, ctx: &ApiContext) -> Result<&Token> {
        match self.tokens.get(&ctx.token) {
            None => Err(Error::Unauthenticated("unknown token".into())),
            Some(t) if t.revoked => Err(Error::Unauthenticated("token revoked".into())),
            Some(t) => Ok(t),
        }
    }

    fn require_api(&self, ctx: &ApiContext, perms: &[Permission]) -> Result<Option<UserId>> {
        let token = self.caller(ctx)?;
        for p in perms {
            if !token.permissions.contains(*p) {
                return Err(Error::PermissionDenied(*p));
            }
        }
        Ok(self.user_by_token.get(&token.id).copied())
    }

    fn audit(&mut self, ctx: &ApiContext, action: &str, subject: impl ToString) -> Result<()> {
        let entry = AuditEntry { time: self.now(), request_id: ctx.request_id.clone(), action: action.into(), subject: subject.to_string() };
        self.store.append_audit(&entry)?;
        self.audit.push(entry);
        Ok(())
    }

    pub fn authorize(&self, ctx: &ApiContext) -> Result<()> {
        self.caller(ctx).map(|_| ())
    }

    fn mint_token(&mut self, spec: NewToken) -> Result<Token> {
        if let Some(r) = &spec.login_room_id {
            if !self.rooms.contains_key(r) {
                return Err(Error::not_found("room", r));
            }
        }
        if let Some(t) = spec.task_id {
            if !self.tasks.contains_key(&t) {
                return Err(Error::not_found("task", t));
            }
        }
        let token = Token {
            id: TokenId::generate(),
            permissions: spec.permissions,
            task_id: spec.task_id,
            login_room_id: spec.login_room_id,
            uses_remaining: spec.uses,
            revoked: false,
            kind: spec.kind,
            visible_in_roster: spec.visible_in_roster,
        };
        self.store.put_token(&token)?;
        self.tokens.insert(token.id.clone(), token.clone());
        Ok(token)
    }

    pub fn create_token(&mut self, ctx: &ApiContext, spec: NewToken) -> Result<Token> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        let token = self.mint_token(spec)?;
        self.audit(ctx, "create_token", &token.id)?;
        Ok(token)
    }

    pub fn get_token(&self, ctx: &ApiContext, id: &TokenId) -> Result<Token> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        self.tokens.get(id).cloned().ok_or_else(|| Error::not_found("token", id))
    }

    /// Revokes a token; a connected holder is told and then disconnected.
    pub fn revoke_token(&mut self, ctx: &ApiContext, id: &TokenId, out: &mut Vec<Outgoing>) -> Result<Token> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        let mut token = self.tokens.get(id).cloned().ok_or_else(|| Error::not_found("token", id))?;
        if token.revoked {
            return Ok(token);
        }
        let before = token.permissions;
        token.revoked = true;
        self.store.put_token(&token)?;
        self.tokens.insert(id.clone(), token.clone());
        self.audit(ctx, "revoke_token", id)?;
        if let Some(uid) = self.user_by_token.get(id).copied() {
            let rooms: Vec<RoomId> = self.users[&uid].rooms.iter().cloned().collect();
            let payload = PermissionUpdatePayload::User {
                user: uid,
                permissions: PermissionSet::empty(),
                added: PermissionSet::empty(),
                removed: before,
                revoked: true,
            };
            for room in rooms {
                self.commit(Draft::server(&room, EventType::PermissionUpdate, to_value(&payload), ctx.request_id.clone()), out)?;
            }
            self.kick(uid, "token revoked", out)?;
        }
        Ok(token)
    }

    fn patch_token_permissions(&mut self, ctx: &ApiContext, id: &TokenId, patch: &PermissionPatch, out: &mut Vec<Outgoing>) -> Result<Token> {
        let mut token = self.tokens.get(id).cloned().ok_or_else(|| Error::not_found("token", id))?;
        let old = token.permissions;
        let new = old.union(patch.add).difference(patch.remove);
        token.permissions = new;
        self.store.put_token(&token)?;
        self.tokens.insert(id.clone(), token.clone());
        self.audit(ctx, "patch_permissions", id)?;
        if new != old && !token.revoked {
            if let Some(uid) = self.user_by_token.get(id).copied() {
                let payload = PermissionUpdatePayload::User {
                    user: uid,
                    permissions: new,
                    added: new.difference(old),
                    removed: old.difference(new),
                    revoked: false,
                };
                let rooms: Vec<RoomId> = self.users[&uid].rooms.iter().cloned().collect();
                for room in rooms {
                    self.commit(Draft::server(&room, EventType::PermissionUpdate, to_value(&payload), ctx.request_id.clone()), out)?;
                }
            }
        }
        Ok(token)
    }

    pub fn update_token_permissions(&mut self, ctx: &ApiContext, id: &TokenId, patch: &PermissionPatch, out: &mut Vec<Outgoing>) -> Result<Token> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        self.patch_token_permissions(ctx, id, patch, out)
    }

    /// `(old | add) - remove`, applied to the token behind `user`.
    pub fn update_user_permissions(&mut self, ctx: &ApiContext, user: UserId, patch: &PermissionPatch, out: &mut Vec<Outgoing>) -> Result<PermissionSet> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        let token = self.users.get(&user).ok_or_else(|| Error::not_found("user", user))?.token_id.clone();
        Ok(self.patch_token_permissions(ctx, &token, patch, out)?.permissions)
    }

    fn insert_layout(&mut self, source: String, doc: LayoutDocument) -> Result<LayoutId> {
        let id = LayoutId(self.next_layout);
        self.store.put_layout(id, &source)?;
        self.next_layout += 1;
        self.layouts.insert(id, StoredLayout { source, doc });
        Ok(id)
    }

    /// Stores `source` verbatim after validating it.
    pub fn create_layout(&mut self, ctx: &ApiContext, source: &str) -> Result<LayoutId> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        let doc = LayoutDocument::parse_str(source, self.parse_opts())?;
        let id = self.insert_layout(source.to_string(), doc)?;
        self.audit(ctx, "create_layout", id)?;
        Ok(id)
    }

    pub fn layout_source(&self, ctx: &ApiContext, id: LayoutId) -> Result<String> {
        self.caller(ctx)?;
        self.layouts.get(&id).map(|l| l.source.clone()).ok_or_else(|| Error::not_found("layout", id))
    }

    fn insert_task(&mut self, spec: NewTask) -> Result<Task> {
        if spec.num_users == 0 {
            return Err(Error::validation("num_users", "must be at least 1"));
        }
        if spec.name.trim().is_empty() {
            return Err(Error::validation("name", "must not be empty"));
        }
        if let Some(l) = spec.layout_id {
            if !self.layouts.contains_key(&l) {
                return Err(Error::not_found("layout", l));
            }
        }
        let task = Task { id: TaskId(self.next_task), name: spec.name, num_users: spec.num_users, layout_id: spec.layout_id };
        self.store.put_task(&task)?;
        self.next_task += 1;
        self.tasks.insert(task.id, task.clone());
        Ok(task)
    }

    pub fn create_task(&mut self, ctx: &ApiContext, spec: NewTask) -> Result<Task> {
        self.require_api(ctx, &[Permission::TokenAdmin])?;
        let task = self.insert_task(spec)?;
        self.audit(ctx, "create_task", task.id)?;
        Ok(task)
    }

    pub fn get_task(&self, ctx: &ApiContext, id: TaskId) -> Result<Task> {
        self.caller(ctx)?;
        self.tasks.get(&id).cloned().ok_or_else(|| Error::not_found("task", id))
    }

    fn insert_room(&mut self, spec: NewRoom, request_id: Option<String>, out: &mut Vec<Outgoing>) -> Result<RoomId> {
        let id = match spec.id {
            Some(id) => {
                if !valid_room_id(&id.0) {
                    return Err(Error::validation("id", "use 1 to 64 of [A-Za-z0-9._-]"));
                }
                if self.rooms.contains_key(&id) {
                    return Err(Error::Conflict(format!("room `{id}` already exists")));
                }
                id
            }
            None => loop {
                let candidate = RoomId(format!("room-{}", self.next_auto_room));
                self.next_auto_room += 1;
                if !self.rooms.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        if let Some(l) = spec.layout_id {
            if !self.layouts.contains_key(&l) {
                return Err(Error::not_found("layout", l));
            }
        }
        let mut layout_id = spec.layout_id;
        if let Some(t) = spec.task_id {
            let task = self.tasks.get(&t).ok_or_else(|| Error::not_found("task", t))?;
            layout_id = layout_id.or(task.layout_id);
        }
        let room = Room::new(id.clone(), layout_id, spec.task_id);
        let ord = self.next_ord;
        self.store.put_room(&room, ord)?;
        self.next_ord += 1;
        self.log.create_room(&id);
        self.rooms.insert(id.clone(), RoomRuntime { room, ord, display: Default::default(), typing: Default::default() });
        let payload = RoomCreatedPayload { layout: layout_id, task: spec.task_id };
        self.commit(Draft::server(&id, EventType::RoomCreated, to_value(&payload), request_id), out)?;
        Ok(id)
    }

    pub fn create_room(&mut self, ctx: &ApiContext, spec: NewRoom, out: &mut Vec<Outgoing>) -> Result<RoomInfo> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        let id = self.insert_room(spec, ctx.request_id.clone(), out)?;
        self.room_info(&id)
    }

    fn room_info(&self, id: &RoomId) -> Result<RoomInfo> {
        let rt = self.rooms.get(id).ok_or_else(|| Error::not_found("room", id))?;
        Ok(RoomInfo { room: rt.room.clone(), last_seq: self.log.next_seq(id) - 1 })
    }

    pub fn get_room(&self, ctx: &ApiContext, id: &RoomId) -> Result<RoomInfo> {
        self.caller(ctx)?;
        self.room_info(id)
    }

    /// Rooms in creation order.
    pub fn list_rooms(&self, ctx: &ApiContext) -> Result<Vec<RoomInfo>> {
        self.caller(ctx)?;
        let mut rooms: Vec<&RoomRuntime> = self.rooms.values().collect();
        rooms.sort_by_key(|r| r.ord);
        rooms.into_iter().map(|r| self.room_info(&r.room.id)).collect()
    }

    pub fn get_user(&self, ctx: &ApiContext, id: UserId) -> Result<User> {
        self.caller(ctx)?;
        self.users.get(&id).cloned().ok_or_else(|| Error::not_found("user", id))
    }

    fn persist_room(&self, id: &RoomId) -> Result<()> {
        let rt = &self.rooms[id];
        self.store.put_room(&rt.room, rt.ord)
    }

    pub fn close_room(&mut self, ctx: &ApiContext, id: &RoomId, out: &mut Vec<Outgoing>) -> Result<RoomInfo> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        let rt = self.rooms.get(id).ok_or_else(|| Error::not_found("room", id))?;
        if rt.room.read_only {
            return Err(Error::Conflict(format!("room `{id}` is already closed")));
        }
        self.commit(Draft::server(id, EventType::RoomClosed, json!({}), ctx.request_id.clone()), out)?;
        self.rooms.get_mut(id).expect("checked").room.read_only = true;
        self.persist_room(id)?;
        self.room_info(id)
    }

    pub fn attach_video_session(&mut self, ctx: &ApiContext, id: &RoomId, session: &str, out: &mut Vec<Outgoing>) -> Result<RoomInfo> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        let rt = self.rooms.get(id).ok_or_else(|| Error::not_found("room", id))?;
        if rt.room.video_session.is_some() {
            return Err(Error::Conflict(format!("room `{id}` already has a video session")));
        }
        if session.trim().is_empty() {
            return Err(Error::validation("video_session", "must not be empty"));
        }
        let payload = VideoSessionPayload { video_session: session.to_string() };
        self.commit(Draft::server(id, EventType::DisplayUpdate, to_value(&payload), ctx.request_id.clone()), out)?;
        self.rooms.get_mut(id).expect("checked").room.video_session = Some(session.to_string());
        self.persist_room(id)?;
        self.room_info(id)
    }

    /// Routes human contributions in `room` through the calling bot.
    pub fn set_relay(&mut self, ctx: &ApiContext, id: &RoomId, enabled: bool, out: &mut Vec<Outgoing>) -> Result<RoomInfo> {
        let caller = self.require_api(ctx, &[Permission::RoomAdmin])?;
        let rt = self.rooms.get(id).ok_or_else(|| Error::not_found("room", id))?;
        let bot = caller
            .filter(|u| self.users.get(u).is_some_and(|u| u.kind == UserKind::Bot))
            .ok_or_else(|| Error::Forbidden("only a bot can relay a room".into()))?;
        if !rt.room.members.contains(&bot) {
            return Err(Error::Membership(format!("relay bot must be a member of `{id}`")));
        }
        let next = match (enabled, rt.room.relay_bot_id) {
            (true, Some(other)) if other != bot => {
                return Err(Error::Conflict(format!("room `{id}` is already relayed by user {other}")))
            }
            (false, Some(other)) if other != bot => return Err(Error::Forbidden("relay held by another bot".into())),
            (true, _) => Some(bot),
            (false, _) => None,
        };
        if next != rt.room.relay_bot_id {
            let payload = PermissionUpdatePayload::Relay { relay_bot: next };
            self.commit(Draft::server(id, EventType::PermissionUpdate, to_value(&payload), ctx.request_id.clone()), out)?;
            self.rooms.get_mut(id).expect("checked").room.relay_bot_id = next;
            self.persist_room(id)?;
        }
        self.room_info(id)
    }

    /// Advisory exclusive role in a room. A claim held by a disconnected user
    /// can be taken over. Returns the holder after the call.
    pub fn claim(&mut self, ctx: &ApiContext, id: &RoomId, role: &str) -> Result<UserId> {
        let caller = self.require_api(ctx, &[Permission::RoomAdmin])?;
        let me = caller.ok_or_else(|| Error::Forbidden("claims need a logged-in user".into()))?;
        let rt = self.rooms.get(id).ok_or_else(|| Error::not_found("room", id))?;
        if let Some(holder) = rt.room.claims.get(role).copied() {
            if holder != me && self.session_of.contains_key(&holder) {
                return Err(Error::Conflict(format!("`{role}` in `{id}` is held by user {holder}")));
            }
        }
        self.rooms.get_mut(id).expect("checked").room.claims.insert(role.to_string(), me);
        self.persist_room(id)?;
        self.audit(ctx, "claim", format!("{id}/{role}"))?;
        Ok(me)
    }

    /// Moves a connected user into `to`, leaving `from` when given. A human
    /// still in another room needs `from`.
    pub fn move_user(&mut self, ctx: &ApiContext, user: UserId, from: Option<&RoomId>, to: &RoomId, out: &mut Vec<Outgoing>) -> Result<User> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        let u = self.users.get(&user).ok_or_else(|| Error::not_found("user", user))?;
        if !self.session_of.contains_key(&user) {
            return Err(Error::Conflict(format!("user {user} is not connected")));
        }
        if !self.rooms.contains_key(to) {
            return Err(Error::not_found("room", to));
        }
        if let Some(f) = from {
            if !u.rooms.contains(f) {
                return Err(Error::Membership(format!("user {user} is not in room `{f}`")));
            }
        }
        if let Some(f) = from.filter(|f| *f != to) {
            self.leave_internal(user, f, LeaveReason::Moved, ctx.request_id.clone(), out)?;
        }
        self.join_internal(user, to, ctx.request_id.clone(), out)?;
        Ok(self.users[&user].clone())
    }

    pub fn remove_from_room(&mut self, ctx: &ApiContext, user: UserId, room: &RoomId, out: &mut Vec<Outgoing>) -> Result<User> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        if !self.users.contains_key(&user) {
            return Err(Error::not_found("user", user));
        }
        self.leave_internal(user, room, LeaveReason::Removed, ctx.request_id.clone(), out)?;
        Ok(self.users[&user].clone())
    }

    pub fn kick_user(&mut self, ctx: &ApiContext, user: UserId, out: &mut Vec<Outgoing>) -> Result<()> {
        self.require_api(ctx, &[Permission::RoomAdmin])?;
        if !self.users.contains_key(&user) {
            return Err(Error::not_found("user", user));
        }
        if !self.session_of.contains_key(&user) {
            return Err(Error::Conflict(format!("user {user} is not connected")));
        }
        self.audit(ctx, "kick", user)?;
        self.kick(user, "removed by an administrator", out)
    }

    pub fn room_log(&self, ctx: &ApiContext, room: &RoomId, since: u64) -> Result<Vec<LogEntry>> {
        self.require_api(ctx, &[Permission::LogRead])?;
        self.log.since(room, since).map(<[LogEntry]>::to_vec).ok_or_else(|| Error::not_found("room", room))
    }

    pub fn export(&self, ctx: &ApiContext) -> Result<StateExport> {
        self.require_api(ctx, &[Permission::TokenAdmin, Permission::LogRead])?;
        Ok(self.export_state())
    }

    pub fn export_state(&self) -> StateExport {
        StateExport {
            tokens: self.tokens.values().cloned().collect(),
            layouts: self.layouts.iter().map(|(id, l)| (*id, l.source.clone())).collect(),
            tasks: self.tasks.values().cloned().collect(),
            rooms: self.rooms.values().map(|r| r.room.clone()).collect(),
            users: self.users.values().cloned().collect(),
            logs: self.log.rooms().map(|(r, e)| (r.clone(), e.to_vec())).collect(),
        }
    }

    pub fn apply_bundle(&mut self, ctx: &ApiContext, bundle: Bundle, out: &mut Vec<Outgoing>) -> Result<BundleResult> {
        self.require_api(ctx, &[Permission::TokenAdmin, Permission::RoomAdmin])?;
        let opts = self.parse_opts();
        let mut docs = BTreeMap::new();
        for (name, value) in &bundle.layouts {
            let doc = LayoutDocument::parse_value(value, opts).map_err(|e| match e {
                Error::Validation { path, message } => Error::validation(format!("layouts.{name}.{path}"), message),
                other => other,
            })?;
            docs.insert(name.clone(), doc);
        }
        let layout_ref = |path: String, name: &Option<String>| match name {
            Some(n) if !docs.contains_key(n) => Err(Error::validation(path, format!("unknown layout `{n}`"))),
            _ => Ok(()),
        };
        let mut room_ids = BTreeSet::new();
        for (i, r) in bundle.rooms.iter().enumerate() {
            if !valid_room_id(&r.id.0) {
                return Err(Error::validation(format!("rooms[{i}].id"), "use 1 to 64 of [A-Za-z0-9._-]"));
            }
            if self.rooms.contains_key(&r.id) || !room_ids.insert(r.id.clone()) {
                return Err(Error::validation(format!("rooms[{i}].id"), format!("room `{}` already exists", r.id)));
            }
            layout_ref(format!("rooms[{i}].layout"), &r.layout)?;
        }
        let mut task_names = BTreeSet::new();
        for (i, t) in bundle.tasks.iter().enumerate() {
            if t.num_users == 0 {
                return Err(Error::validation(format!("tasks[{i}].num_users"), "must be at least 1"));
            }
            if t.name.trim().is_empty() || !task_names.insert(t.name.clone()) {
                return Err(Error::validation(format!("tasks[{i}].name"), "must be non-empty and unique"));
            }
            layout_ref(format!("tasks[{i}].layout"), &t.layout)?;
        }
        for (i, t) in bundle.tokens.iter().enumerate() {
            if t.count == 0 || t.count > 10_000 {
                return Err(Error::validation(format!("tokens[{i}].count"), "must be between 1 and 10000"));
            }
            if let Some(r) = &t.login_room {
                if !self.rooms.contains_key(r) && !room_ids.contains(r) {
                    return Err(Error::validation(format!("tokens[{i}].login_room"), format!("unknown room `{r}`")));
                }
            }
            if let Some(n) = &t.task {
                if !task_names.contains(n) {
                    return Err(Error::validation(format!("tokens[{i}].task"), format!("unknown task `{n}`")));
                }
            }
        }

        let mut result = BundleResult::default();
        for (name, value) in &bundle.layouts {
            let source = serde_json::to_string(value).expect("json value serializes");
            let id = self.insert_layout(source, docs.remove(name).expect("parsed above"))?;
            result.layouts.insert(name.clone(), id);
        }
        for r in bundle.rooms {
            let layout_id = r.layout.as_ref().map(|n| result.layouts[n]);
            let id = self.insert_room(NewRoom { id: Some(r.id), layout_id, task_id: None }, ctx.request_id.clone(), out)?;
            result.rooms.push(id);
        }
        for t in bundle.tasks {
            let layout_id = t.layout.as_ref().map(|n| result.layouts[n]);
            let task = self.insert_task(NewTask { name: t.name.clone(), num_users: t.num_users, layout_id })?;
            result.tasks.insert(t.name, task.id);
        }
        for t in bundle.tokens {
            for _ in 0..t.count {
                let token = self.mint_token(NewToken {
                    permissions: t.permissions,
                    login_room_id: t.login_room.clone(),
                    task_id: t.task.as_ref().map(|n| result.tasks[n]),
                    uses: t.uses,
                    kind: t.kind,
                    visible_in_roster: t.visible_in_roster,
                })?;
                result.tokens.push(token);
            }
        }
        self.audit(ctx, "apply_bundle", format!("{} rooms, {} tokens", result.rooms.len(), result.tokens.len()))?;
        Ok(result)
    }

    // ---- comparison with replay ----

    /// Comparable per-room state held in memory.
    pub fn live_summaries(&self) -> BTreeMap<RoomId, RoomSummary> {
        self.rooms
            .values()
            .map(|rt| {
                let members = rt.room.members.clone();
                let summary = RoomSummary {
                    permissions: members.iter().map(|u| (*u, self.permissions_of(*u))).collect(),
                    displays: members
                        .iter()
                        .map(|u| (*u, render(self.layout_of(&rt.room), rt.display.for_user(*u)).to_json()))
                        .collect(),
                    members,
                    read_only: rt.room.read_only,
                    relay_bot: rt.room.relay_bot_id,
                    video_session: rt.room.video_session.clone(),
                };
                (rt.room.id.clone(), summary)
            })
            .collect()
    }

    /// The same summaries computed from a replayed log, using this hub's layouts.
    pub fn replay_summaries(&self, replay: &ReplayState) -> BTreeMap<RoomId, RoomSummary> {
        replay
            .rooms
            .iter()
            .map(|(id, r)| {
                let layout = self.rooms.get(id).map_or(&self.default_layout, |rt| self.layout_of(&rt.room));
                let summary = RoomSummary {
                    members: r.members.clone(),
                    read_only: r.read_only,
                    relay_bot: r.relay_bot,
                    video_session: r.video_session.clone(),
                    permissions: r.members.iter().map(|u| (*u, r.permissions.get(u).copied().unwrap_or_default())).collect(),
                    displays: r.members.iter().map(|u| (*u, render(layout, r.display.for_user(*u)).to_json())).collect(),
                };
                (id.clone(), summary)
            })
            .collect()
    }

    /// Room display state as seen by `user`, for tests and tools.
    pub fn display_for(&self, room: &RoomId, user: UserId) -> Option<DisplayState> {
        self.rooms.get(room).map(|rt| rt.display.for_user(user).clone())
    }
}
