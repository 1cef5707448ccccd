//! The event envelope shared by the gateway, the log and the wire.

use std::fmt;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::layout::ElementOverride;
use crate::model::{PermissionSet, RoomId, TaskId, LayoutId, UserId, UserKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    TextMessage,
    ImageMessage,
    Command,
    TypingStarted,
    TypingStopped,
    Keystroke,
    BoundingBox,
    Mouse,
    Joined,
    Left,
    DisplayUpdate,
    PermissionUpdate,
    RoomCreated,
    RoomClosed,
    CodeIssued,
}

impl EventType {
    pub const ALL: [EventType; 15] = [
        EventType::TextMessage,
        EventType::ImageMessage,
        EventType::Command,
        EventType::TypingStarted,
        EventType::TypingStopped,
        EventType::Keystroke,
        EventType::BoundingBox,
        EventType::Mouse,
        EventType::Joined,
        EventType::Left,
        EventType::DisplayUpdate,
        EventType::PermissionUpdate,
        EventType::RoomCreated,
        EventType::RoomClosed,
        EventType::CodeIssued,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::TextMessage => "text_message",
            EventType::ImageMessage => "image_message",
            EventType::Command => "command",
            EventType::TypingStarted => "typing_started",
            EventType::TypingStopped => "typing_stopped",
            EventType::Keystroke => "keystroke",
            EventType::BoundingBox => "bounding_box",
            EventType::Mouse => "mouse",
            EventType::Joined => "joined",
            EventType::Left => "left",
            EventType::DisplayUpdate => "display_update",
            EventType::PermissionUpdate => "permission_update",
            EventType::RoomCreated => "room_created",
            EventType::RoomClosed => "room_closed",
            EventType::CodeIssued => "code_issued",
        }
    }

    pub fn parse(s: &str) -> Option<EventType> {
        EventType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Events clients may emit. The rest are produced by the server.
    pub fn client_emittable(self) -> bool {
        !matches!(
            self,
            EventType::Joined | EventType::Left | EventType::PermissionUpdate | EventType::RoomCreated | EventType::RoomClosed
        )
    }

    /// Participant contributions, refused in read-only rooms.
    pub fn is_participant(self) -> bool {
        matches!(
            self,
            EventType::TextMessage
                | EventType::ImageMessage
                | EventType::Command
                | EventType::TypingStarted
                | EventType::TypingStopped
                | EventType::Keystroke
                | EventType::BoundingBox
                | EventType::Mouse
        )
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// UTC instant with millisecond precision, serialized as ISO-8601.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn millis(self) -> i64 {
        self.0
    }

    fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0).single().unwrap_or_default()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_datetime().to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|dt| Timestamp(dt.timestamp_millis()))
            .map_err(serde::de::Error::custom)
    }
}

/// A persisted event. Immutable once appended; `seq` is gapless per room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub room: RoomId,
    pub time: Timestamp,
    /// `None` for server-originated events.
    pub actor: Option<UserId>,
    /// Author shown to humans when a bot speaks on someone's behalf.
    pub displayed_actor: Option<UserId>,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub receiver: Option<UserId>,
    pub payload: Value,
    pub request_id: Option<String>,
}

impl LogEntry {
    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Option<T> {
        serde_json::from_value(self.payload.clone()).ok()
    }
}

/// Target of a display update: the whole room or one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Room,
    User(UserId),
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Scope::Room => serializer.serialize_str("room"),
            Scope::User(id) => serializer.serialize_u64(id.0),
        }
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Value::deserialize(deserializer)? {
            Value::String(s) if s == "room" => Ok(Scope::Room),
            Value::Number(n) => n
                .as_u64()
                .map(|id| Scope::User(UserId(id)))
                .ok_or_else(|| serde::de::Error::custom("scope must be \"room\" or a user id")),
            _ => Err(serde::de::Error::custom("scope must be \"room\" or a user id")),
        }
    }
}

impl Default for Scope {
    fn default() -> Self {
        Scope::Room
    }
}

// Typed payloads. Entries store them as JSON values.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPayload {
    pub text: String,
    /// Impersonation target; only bots holding `send_impersonated` may set it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_user: Option<UserId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePayload {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandPayload {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeystrokePayload {
    /// The whole draft so far, not a delta.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TypingPayload {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

/// Box corners in element-relative pixels. Stored with x0 <= x1 and y0 <= y1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBoxPayload {
    pub element_id: String,
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBoxPayload {
    pub fn normalized(self) -> Self {
        BoundingBoxPayload {
            element_id: self.element_id,
            x0: self.x0.min(self.x1),
            y0: self.y0.min(self.y1),
            x1: self.x0.max(self.x1),
            y1: self.y0.max(self.y1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MousePayload {
    pub element_id: String,
    pub x: i64,
    pub y: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayUpdatePayload {
    #[serde(flatten)]
    pub change: ElementOverride,
    #[serde(default)]
    pub scope: Scope,
}

/// Room-level notice that a video session was attached. Delivered only to
/// members holding `video_subscribe`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSessionPayload {
    pub video_session: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinedPayload {
    pub user: UserId,
    pub name: String,
    pub kind: UserKind,
    pub permissions: PermissionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    #[serde(default = "yes")]
    pub visible_in_roster: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeftPayload {
    pub user: UserId,
    pub reason: LeaveReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaveReason {
    Moved,
    Removed,
    Disconnected,
}

/// Either a user's new effective permissions or a room relay change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PermissionUpdatePayload {
    User {
        user: UserId,
        permissions: PermissionSet,
        added: PermissionSet,
        removed: PermissionSet,
        #[serde(default)]
        revoked: bool,
    },
    Relay {
        relay_bot: Option<UserId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomCreatedPayload {
    pub layout: Option<LayoutId>,
    pub task: Option<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeIssuedPayload {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_format_has_millis() {
        let ts = Timestamp(1_700_000_000_123);
        let s = serde_json::to_string(&ts).unwrap();
        assert_eq!(s, "\"2023-11-14T22:13:20.123Z\"");
        assert_eq!(serde_json::from_str::<Timestamp>(&s).unwrap(), ts);
    }

    #[test]
    fn box_normalization() {
        let b = BoundingBoxPayload { element_id: "a".into(), x0: 50, y0: 40, x1: 10, y1: 10 }.normalized();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (10, 10, 50, 40));
        let p = BoundingBoxPayload { element_id: "a".into(), x0: 10, y0: 10, x1: 10, y1: 10 }.normalized();
        assert_eq!((p.x0, p.y0, p.x1, p.y1), (10, 10, 10, 10));
    }

    #[test]
    fn scope_wire_form() {
        assert_eq!(serde_json::to_string(&Scope::Room).unwrap(), "\"room\"");
        assert_eq!(serde_json::to_string(&Scope::User(UserId(7))).unwrap(), "7");
        assert_eq!(serde_json::from_str::<Scope>("7").unwrap(), Scope::User(UserId(7)));
        assert!(serde_json::from_str::<Scope>("\"everyone\"").is_err());
    }

    #[test]
    fn event_type_names() {
        for t in EventType::ALL {
            assert_eq!(EventType::parse(t.as_str()), Some(t));
            assert_eq!(serde_json::to_value(t).unwrap(), Value::String(t.as_str().into()));
        }
        assert_eq!(EventType::parse("video_frame"), None);
    }

    #[test]
    fn log_entry_schema_keys() {
        let e = LogEntry {
            seq: 1,
            room: "r".into(),
            time: Timestamp(0),
            actor: Some(UserId(2)),
            displayed_actor: None,
            event_type: EventType::TextMessage,
            receiver: None,
            payload: serde_json::json!({"text": "hi"}),
            request_id: None,
        };
        let v = serde_json::to_value(&e).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["actor", "displayed_actor", "payload", "receiver", "request_id", "room", "seq", "time", "type"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_boxes_are_ordered(x0 in -500i64..500, y0 in -500i64..500, x1 in -500i64..500, y1 in -500i64..500) {
                let b = BoundingBoxPayload { element_id: "e".into(), x0, y0, x1, y1 }.normalized();
                prop_assert!(b.x0 <= b.x1 && b.y0 <= b.y1);
                let mut xs = [x0, x1]; xs.sort();
                let mut ys = [y0, y1]; ys.sort();
                prop_assert_eq!((b.x0, b.x1, b.y0, b.y1), (xs[0], xs[1], ys[0], ys[1]));
            }

            #[test]
            fn timestamps_round_trip(ms in 0i64..4_102_444_800_000) {
                let ts = Timestamp(ms);
                let back: Timestamp = serde_json::from_str(&serde_json::to_string(&ts).unwrap()).unwrap();
                prop_assert_eq!(back, ts);
            }
        }
    }
}
