//! Transport-neutral REST routing. Paths are relative to `/api/v1`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | /tokens | mint a token |
//! | GET, DELETE | /tokens/{id} | read, revoke |
//! | PATCH | /tokens/{id}/permissions | `{add, remove}` |
//! | POST | /layouts | store a layout document verbatim |
//! | GET | /layouts/{id} | the stored source |
//! | POST | /tasks, GET /tasks/{id} | |
//! | GET, POST | /rooms | list, create |
//! | GET | /rooms/{id} | |
//! | POST | /rooms/{id}/close, /video-session, /relay, /claim | |
//! | GET | /rooms/{id}/logs?since=&format=ndjson | |
//! | GET | /users/{id} | |
//! | POST | /users/{id}/move, /users/{id}/leave | |
//! | PATCH | /users/{id}/permissions | |
//! | DELETE | /users/{id}/session | disconnect |
//! | GET | /export | full state |
//! | POST | /bundles | atomic batch creation |

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::hub::{ApiContext, Bundle, Hub, NewRoom, NewTask, NewToken, Outgoing, PermissionPatch};
use crate::log::to_ndjson;
use crate::model::{LayoutId, RoomId, TaskId, TokenId, UserId};

#[derive(Debug, Clone, Default)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub bearer: Option<String>,
    pub request_id: Option<String>,
    pub body: String,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        let (path, query) = match path.split_once('?') {
            Some((p, q)) => (p, parse_query(q)),
            None => (path, BTreeMap::new()),
        };
        ApiRequest { method: method.to_ascii_uppercase(), path: path.to_string(), query, ..Default::default() }
    }

    pub fn bearer(mut self, token: impl Into<String>) -> Self {
        self.bearer = Some(token.into());
        self
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = body.to_string();
        self
    }

    pub fn body(mut self, body: impl Into<String>) -> Self {
        self.body = body.into();
        self
    }
}

pub fn parse_query(q: &str) -> BTreeMap<String, String> {
    url::form_urlencoded::parse(q.as_bytes()).into_owned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiBody {
    Json(Value),
    Text { content_type: &'static str, text: String },
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: ApiBody,
}

impl ApiResponse {
    fn ok<T: Serialize>(status: u16, v: &T) -> Self {
        ApiResponse { status, body: ApiBody::Json(serde_json::to_value(v).expect("responses serialize")) }
    }

    pub fn error(e: &Error) -> Self {
        ApiResponse { status: e.status(), body: ApiBody::Json(json!({ "error": e.body() })) }
    }

    pub fn json(&self) -> Value {
        match &self.body {
            ApiBody::Json(v) => v.clone(),
            ApiBody::Text { text, .. } => Value::String(text.clone()),
            ApiBody::Empty => Value::Null,
        }
    }

    pub fn text(&self) -> String {
        match &self.body {
            ApiBody::Json(v) => v.to_string(),
            ApiBody::Text { text, .. } => text.clone(),
            ApiBody::Empty => String::new(),
        }
    }
}

fn body<T: DeserializeOwned>(req: &ApiRequest) -> Result<T> {
    let text = if req.body.trim().is_empty() { "{}" } else { &req.body };
    serde_json::from_str(text).map_err(|e| Error::validation("$", e.to_string()))
}

fn id_u64(s: &str, what: &'static str) -> Result<u64> {
    s.parse().map_err(|_| Error::not_found(what, s))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveBody {
    #[serde(default)]
    from: Option<RoomId>,
    to: RoomId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomBody {
    room: RoomId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoBody {
    video_session: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelayBody {
    enabled: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaimBody {
    role: String,
}

pub fn handle(hub: &mut Hub, req: &ApiRequest, out: &mut Vec<Outgoing>) -> ApiResponse {
    match route(hub, req, out) {
        Ok(r) => r,
        Err(e) => ApiResponse::error(&e),
    }
}

fn route(hub: &mut Hub, req: &ApiRequest, out: &mut Vec<Outgoing>) -> Result<ApiResponse> {
    let token = req.bearer.clone().ok_or_else(|| Error::Unauthenticated("missing bearer token".into()))?;
    let ctx = ApiContext { token: TokenId(token), request_id: req.request_id.clone() };
    hub.authorize(&ctx)?;

    let segs: Vec<&str> = req.path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
    let m = req.method.as_str();
    let not_route = || Error::not_found("route", format!("{m} /{}", segs.join("/")));

    Ok(match (m, segs.as_slice()) {
        ("POST", ["tokens"]) => ApiResponse::ok(201, &hub.create_token(&ctx, body::<NewToken>(req)?)?),
        ("GET", ["tokens", id]) => ApiResponse::ok(200, &hub.get_token(&ctx, &TokenId(id.to_string()))?),
        ("DELETE", ["tokens", id]) => ApiResponse::ok(200, &hub.revoke_token(&ctx, &TokenId(id.to_string()), out)?),
        ("PATCH", ["tokens", id, "permissions"]) => {
            let patch: PermissionPatch = body(req)?;
            ApiResponse::ok(200, &hub.update_token_permissions(&ctx, &TokenId(id.to_string()), &patch, out)?)
        }

        ("POST", ["layouts"]) => ApiResponse::ok(201, &json!({ "id": hub.create_layout(&ctx, &req.body)? })),
        ("GET", ["layouts", id]) => {
            let text = hub.layout_source(&ctx, LayoutId(id_u64(id, "layout")?))?;
            ApiResponse { status: 200, body: ApiBody::Text { content_type: "application/json", text } }
        }

        ("POST", ["tasks"]) => ApiResponse::ok(201, &hub.create_task(&ctx, body::<NewTask>(req)?)?),
        ("GET", ["tasks", id]) => ApiResponse::ok(200, &hub.get_task(&ctx, TaskId(id_u64(id, "task")?))?),

        ("GET", ["rooms"]) => ApiResponse::ok(200, &hub.list_rooms(&ctx)?),
        ("POST", ["rooms"]) => ApiResponse::ok(201, &hub.create_room(&ctx, body::<NewRoom>(req)?, out)?),
        ("GET", ["rooms", id]) => ApiResponse::ok(200, &hub.get_room(&ctx, &RoomId::from(*id))?),
        ("POST", ["rooms", id, "close"]) => ApiResponse::ok(200, &hub.close_room(&ctx, &RoomId::from(*id), out)?),
        ("POST", ["rooms", id, "video-session"]) => {
            let b: VideoBody = body(req)?;
            ApiResponse::ok(200, &hub.attach_video_session(&ctx, &RoomId::from(*id), &b.video_session, out)?)
        }
        ("POST", ["rooms", id, "relay"]) => {
            let b: RelayBody = body(req)?;
            ApiResponse::ok(200, &hub.set_relay(&ctx, &RoomId::from(*id), b.enabled, out)?)
        }
        ("POST", ["rooms", id, "claim"]) => {
            let b: ClaimBody = body(req)?;
            ApiResponse::ok(200, &json!({ "holder": hub.claim(&ctx, &RoomId::from(*id), &b.role)? }))
        }
        ("GET", ["rooms", id, "logs"]) => {
            let since = match req.query.get("since") {
                Some(s) => s.parse().map_err(|_| Error::validation("since", "expected a sequence number"))?,
                None => 0,
            };
            let entries = hub.room_log(&ctx, &RoomId::from(*id), since)?;
            match req.query.get("format").map(String::as_str) {
                Some("ndjson") => ApiResponse { status: 200, body: ApiBody::Text { content_type: "application/x-ndjson", text: to_ndjson(&entries) } },
                None | Some("json") => ApiResponse::ok(200, &entries),
                Some(other) => return Err(Error::validation("format", format!("unknown format `{other}`"))),
            }
        }

        ("GET", ["users", id]) => ApiResponse::ok(200, &hub.get_user(&ctx, UserId(id_u64(id, "user")?))?),
        ("POST", ["users", id, "move"]) => {
            let b: MoveBody = body(req)?;
            ApiResponse::ok(200, &hub.move_user(&ctx, UserId(id_u64(id, "user")?), b.from.as_ref(), &b.to, out)?)
        }
        ("POST", ["users", id, "leave"]) => {
            let b: RoomBody = body(req)?;
            ApiResponse::ok(200, &hub.remove_from_room(&ctx, UserId(id_u64(id, "user")?), &b.room, out)?)
        }
        ("PATCH", ["users", id, "permissions"]) => {
            let patch: PermissionPatch = body(req)?;
            let perms = hub.update_user_permissions(&ctx, UserId(id_u64(id, "user")?), &patch, out)?;
            ApiResponse::ok(200, &json!({ "permissions": perms }))
        }
        ("DELETE", ["users", id, "session"]) => {
            hub.kick_user(&ctx, UserId(id_u64(id, "user")?), out)?;
            ApiResponse { status: 204, body: ApiBody::Empty }
        }

        ("GET", ["export"]) => ApiResponse::ok(200, &hub.export(&ctx)?),
        ("POST", ["bundles"]) => ApiResponse::ok(201, &hub.apply_bundle(&ctx, body::<Bundle>(req)?, out)?),

        _ => return Err(not_route()),
    })
}
