//! Rebuilding room state by folding log entries.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::event::{
    DisplayUpdatePayload, EventType, JoinedPayload, LogEntry, PermissionUpdatePayload, Scope, VideoSessionPayload,
};
use crate::layout::{DisplayState, ElementOverride};
use crate::model::{PermissionSet, RoomId, UserId};

/// Display overrides for one room: a room-wide fold plus per-user folds.
/// A user's fold sees room-scoped and user-scoped changes in event order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScopedDisplay {
    room: DisplayState,
    users: BTreeMap<UserId, DisplayState>,
}

impl ScopedDisplay {
    pub fn apply(&mut self, scope: Scope, ov: &ElementOverride) {
        match scope {
            Scope::Room => {
                self.room.apply(ov);
                for state in self.users.values_mut() {
                    state.apply(ov);
                }
            }
            Scope::User(user) => {
                self.users.entry(user).or_insert_with(|| self.room.clone()).apply(ov);
            }
        }
    }

    pub fn for_user(&self, user: UserId) -> &DisplayState {
        self.users.get(&user).unwrap_or(&self.room)
    }

    pub fn room(&self) -> &DisplayState {
        &self.room
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoomReplay {
    pub members: BTreeSet<UserId>,
    pub read_only: bool,
    pub relay_bot: Option<UserId>,
    pub video_session: Option<String>,
    pub display: ScopedDisplay,
    pub typing: BTreeSet<UserId>,
    /// Last permission set seen for each user in this room.
    pub permissions: BTreeMap<UserId, PermissionSet>,
    pub last_seq: u64,
}

impl RoomReplay {
    pub fn apply(&mut self, entry: &LogEntry) -> Result<()> {
        if entry.seq != self.last_seq + 1 {
            return Err(Error::Ordering(format!("room `{}`: seq {} follows {}", entry.room, entry.seq, self.last_seq)));
        }
        self.last_seq = entry.seq;
        let bad = |what: &str| Error::validation(format!("{}#{}", entry.room, entry.seq), format!("malformed {what} payload"));
        match entry.event_type {
            EventType::Joined => {
                let p: JoinedPayload = entry.payload_as().ok_or_else(|| bad("joined"))?;
                self.members.insert(p.user);
                self.permissions.insert(p.user, p.permissions);
            }
            EventType::Left => {
                let user = entry.payload.get("user").and_then(|v| v.as_u64()).map(UserId).ok_or_else(|| bad("left"))?;
                self.members.remove(&user);
                self.typing.remove(&user);
            }
            EventType::RoomClosed => self.read_only = true,
            EventType::PermissionUpdate => match entry.payload_as::<PermissionUpdatePayload>().ok_or_else(|| bad("permission_update"))? {
                PermissionUpdatePayload::User { user, permissions, .. } => {
                    self.permissions.insert(user, permissions);
                }
                PermissionUpdatePayload::Relay { relay_bot } => self.relay_bot = relay_bot,
            },
            EventType::DisplayUpdate => {
                if let Some(v) = entry.payload_as::<VideoSessionPayload>() {
                    self.video_session = Some(v.video_session);
                } else {
                    let p: DisplayUpdatePayload = entry.payload_as().ok_or_else(|| bad("display_update"))?;
                    self.display.apply(p.scope, &p.change);
                }
            }
            EventType::TypingStarted => {
                if let Some(a) = entry.actor {
                    self.typing.insert(a);
                }
            }
            EventType::TypingStopped => {
                if let Some(a) = entry.actor {
                    self.typing.remove(&a);
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Final state recovered from a set of room logs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayState {
    pub rooms: BTreeMap<RoomId, RoomReplay>,
}

/// The comparable part of a room: what a fresh state machine must agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoomSummary {
    pub members: BTreeSet<UserId>,
    pub read_only: bool,
    pub relay_bot: Option<UserId>,
    pub video_session: Option<String>,
    /// Effective permissions of current members.
    pub permissions: BTreeMap<UserId, PermissionSet>,
    /// Folded display state per current member, as rendered-layout JSON.
    pub displays: BTreeMap<UserId, String>,
}

impl ReplayState {
    /// Folds entries; each room's entries must arrive in seq order with
    /// non-decreasing timestamps.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a LogEntry>) -> Result<Self> {
        let mut state = ReplayState::default();
        let mut last_time: BTreeMap<RoomId, i64> = BTreeMap::new();
        for entry in entries {
            let prev = last_time.entry(entry.room.clone()).or_insert(i64::MIN);
            if entry.time.millis() < *prev {
                return Err(Error::Ordering(format!("room `{}`: timestamp went backwards at seq {}", entry.room, entry.seq)));
            }
            *prev = entry.time.millis();
            state.rooms.entry(entry.room.clone()).or_default().apply(entry)?;
        }
        Ok(state)
    }

    /// Current permissions of `user`, taken from any room they occupy.
    pub fn permissions_of(&self, user: UserId) -> Option<PermissionSet> {
        self.rooms.values().find(|r| r.members.contains(&user)).and_then(|r| r.permissions.get(&user).copied())
    }
}
