//! Gateway frames.
//!
//! Client to server: `{type, room, payload, to?, id?}` where `type` is an
//! event name and `id` is echoed back in the receipt. Server to client:
//! event frames additionally carry `{seq, timestamp, actor, displayed_actor?}`;
//! control frames (`session`, `room_state`, `receipt`) use the same `type` key.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ErrorBody;
use crate::event::{EventType, LogEntry, Timestamp};
use crate::layout::RenderedLayout;
use crate::model::{RoomId, UserId, UserKind};

pub const CLOSE_AUTH_FAILED: u16 = 4001;
pub const CLOSE_TOKEN_EXHAUSTED: u16 = 4002;
pub const CLOSE_KICKED: u16 = 4003;
pub const CLOSE_QUEUE_OVERFLOW: u16 = 4004;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFrame {
    #[serde(rename = "type")]
    pub event_type: String,
    pub room: RoomId,
    #[serde(default = "empty_object")]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl ClientFrame {
    pub fn new(event_type: EventType, room: impl Into<RoomId>, payload: Value) -> Self {
        ClientFrame { event_type: event_type.as_str().to_string(), room: room.into(), payload, to: None, id: None }
    }

    pub fn to(mut self, user: UserId) -> Self {
        self.to = Some(user);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub room: RoomId,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<UserId>,
    pub seq: u64,
    pub timestamp: Timestamp,
    pub actor: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displayed_actor: Option<UserId>,
}

impl EventFrame {
    /// Bots see true authorship; humans see impersonated messages as written
    /// by the displayed author.
    pub fn for_recipient(entry: &LogEntry, recipient: UserKind) -> Self {
        let (actor, displayed_actor) = match (recipient, entry.displayed_actor) {
            (UserKind::Human, Some(shown)) => (Some(shown), None),
            _ => (entry.actor, entry.displayed_actor),
        };
        EventFrame {
            event_type: entry.event_type,
            room: entry.room.clone(),
            payload: entry.payload.clone(),
            to: entry.receiver,
            seq: entry.seq,
            timestamp: entry.time,
            actor,
            displayed_actor,
        }
    }

    /// Who a reader should treat as the author.
    pub fn author(&self) -> Option<UserId> {
        self.displayed_actor.or(self.actor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub id: UserId,
    pub name: String,
    pub kind: UserKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomStateFrame {
    pub room: RoomId,
    pub layout: RenderedLayout,
    pub history: Vec<EventFrame>,
    pub members: Vec<MemberInfo>,
    pub read_only: bool,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    #[serde(default)]
    pub id: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlFrame {
    Session { session_id: String, user: MemberInfo },
    RoomState(RoomStateFrame),
    Receipt(Receipt),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerFrame {
    Event(EventFrame),
    Control(ControlFrame),
}

impl ServerFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }

    pub fn parse(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn control_and_event_frames_are_distinguished() {
        let receipt = ServerFrame::Control(ControlFrame::Receipt(Receipt { id: Some("1".into()), ok: true, room: Some("r".into()), seq: Some(3), error: None }));
        let text = receipt.to_json();
        assert!(text.contains("\"type\":\"receipt\""));
        assert_eq!(ServerFrame::parse(&text).unwrap(), receipt);

        let ev = r#"{"type":"text_message","room":"r","payload":{"text":"hi"},"seq":4,"timestamp":"2026-01-01T00:00:00.000Z","actor":2}"#;
        match ServerFrame::parse(ev).unwrap() {
            ServerFrame::Event(e) => assert_eq!((e.seq, e.actor), (4, Some(UserId(2)))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn humans_see_displayed_author() {
        let entry = LogEntry {
            seq: 1,
            room: "r".into(),
            time: Timestamp(0),
            actor: Some(UserId(9)),
            displayed_actor: Some(UserId(1)),
            event_type: EventType::TextMessage,
            receiver: None,
            payload: serde_json::json!({"text": "hi"}),
            request_id: None,
        };
        let human = EventFrame::for_recipient(&entry, UserKind::Human);
        assert_eq!((human.actor, human.displayed_actor), (Some(UserId(1)), None));
        let bot = EventFrame::for_recipient(&entry, UserKind::Bot);
        assert_eq!((bot.actor, bot.displayed_actor), (Some(UserId(9)), Some(UserId(1))));
        assert_eq!(bot.author(), Some(UserId(1)));
    }

    proptest! {
        #[test]
        fn event_frames_round_trip(seq in 1u64..1_000_000, actor in proptest::option::of(0u64..100), to in proptest::option::of(0u64..100),
                                   text in ".{0,40}", t in 0i64..4_000_000_000_000, ty in proptest::sample::select(EventType::ALL.to_vec())) {
            let frame = ServerFrame::Event(EventFrame {
                event_type: ty,
                room: "room-1".into(),
                payload: serde_json::json!({"text": text}),
                to: to.map(UserId),
                seq,
                timestamp: Timestamp(t),
                actor: actor.map(UserId),
                displayed_actor: None,
            });
            prop_assert_eq!(ServerFrame::parse(&frame.to_json()).unwrap(), frame);
        }
    }
}
