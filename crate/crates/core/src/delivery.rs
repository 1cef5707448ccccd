//! Who receives an event.
//!
//! Recipients are a pure function of the committed entry and the room as it
//! stands at commit time (for `left`, before the member is removed):
//!
//! | event | recipients |
//! |---|---|
//! | `joined`, `left` | all members; only bots and the subject when the subject is a hidden bot |
//! | `room_created`, `room_closed` | all members |
//! | `permission_update` (user) | the affected user and all bots |
//! | `permission_update` (relay) | all members |
//! | `display_update` | scope room: all; scope user: that user and the actor |
//! | `display_update` (video session) | members holding `video_subscribe` |
//! | `code_issued` | receiver, actor and moderator bots |
//! | `command` | all bots and the actor |
//! | human contribution in a relay room | actor and relay bot (typing and keystrokes: relay bot only) |
//! | `text_message`, `image_message` | private: actor, receiver and moderator bots; otherwise all. Minus the impersonated user |
//! | `typing_*`, `keystroke` | all members except the actor |
//! | `bounding_box` | all members |
//! | `mouse` | all bots and the actor |
//!
//! A moderator bot is a bot member holding `room_admin`.

use std::collections::{BTreeMap, BTreeSet};

use crate::event::{EventType, LogEntry};
use crate::model::{Permission, PermissionSet, UserId, UserKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberView {
    pub kind: UserKind,
    pub permissions: PermissionSet,
    pub visible_in_roster: bool,
}

impl MemberView {
    fn is_moderator(&self) -> bool {
        self.kind == UserKind::Bot && self.permissions.contains(Permission::RoomAdmin)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoomView {
    pub members: BTreeMap<UserId, MemberView>,
    pub relay_bot: Option<UserId>,
}

impl RoomView {
    fn bots(&self) -> impl Iterator<Item = UserId> + '_ {
        self.members.iter().filter(|(_, m)| m.kind == UserKind::Bot).map(|(id, _)| *id)
    }

    fn moderators(&self) -> impl Iterator<Item = UserId> + '_ {
        self.members.iter().filter(|(_, m)| m.is_moderator()).map(|(id, _)| *id)
    }
}

fn payload_user(entry: &LogEntry) -> Option<UserId> {
    entry.payload.get("user").and_then(|v| v.as_u64()).map(UserId)
}

pub fn recipients(entry: &LogEntry, view: &RoomView) -> BTreeSet<UserId> {
    let all = || view.members.keys().copied().collect::<BTreeSet<_>>();
    let actor = entry.actor;
    let actor_member = actor.and_then(|a| view.members.get(&a));
    // Fails closed: with the relay bot absent, contributions reach only the actor.
    let relay = view.relay_bot;

    let set: BTreeSet<UserId> = match entry.event_type {
        EventType::Joined | EventType::Left => {
            let subject = payload_user(entry);
            let hidden_bot = subject
                .and_then(|s| view.members.get(&s))
                .is_some_and(|m| m.kind == UserKind::Bot && !m.visible_in_roster);
            if hidden_bot {
                view.bots().chain(subject).collect()
            } else {
                all()
            }
        }
        EventType::RoomCreated | EventType::RoomClosed => all(),
        EventType::PermissionUpdate => match payload_user(entry) {
            Some(user) => view.bots().chain([user]).collect(),
            None => all(),
        },
        EventType::DisplayUpdate => {
            if entry.payload.get("video_session").is_some() {
                view.members
                    .iter()
                    .filter(|(_, m)| m.permissions.contains(Permission::VideoSubscribe))
                    .map(|(id, _)| *id)
                    .collect()
            } else {
                match entry.payload.get("scope").and_then(|s| s.as_u64()) {
                    Some(user) => [UserId(user)].into_iter().chain(actor).collect(),
                    None => all(),
                }
            }
        }
        EventType::CodeIssued => entry.receiver.into_iter().chain(actor).chain(view.moderators()).collect(),
        EventType::Command => view.bots().chain(actor).collect(),
        t if relay.is_some()
            && actor != relay
            && actor_member.is_some_and(|m| m.kind == UserKind::Human) =>
        {
            match t {
                EventType::TypingStarted | EventType::TypingStopped | EventType::Keystroke => relay.into_iter().collect(),
                _ => relay.into_iter().chain(actor).collect(),
            }
        }
        EventType::TextMessage | EventType::ImageMessage => {
            let mut set: BTreeSet<UserId> = match entry.receiver {
                Some(r) => [r].into_iter().chain(actor).chain(view.moderators()).collect(),
                None => all(),
            };
            if let Some(shown) = entry.displayed_actor {
                set.remove(&shown);
            }
            set
        }
        EventType::TypingStarted | EventType::TypingStopped | EventType::Keystroke => {
            let mut set = all();
            if let Some(a) = actor {
                set.remove(&a);
            }
            set
        }
        EventType::BoundingBox => all(),
        EventType::Mouse => view.bots().chain(actor).collect(),
    };

    set.into_iter().filter(|id| view.members.contains_key(id)).collect()
}
