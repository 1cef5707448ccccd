//! Shared domain types and the permission and membership rules every
//! other module enforces.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident($inner:ty)) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(
    /// Numeric user id, assigned in login order.
    UserId(u64)
);
id_newtype!(RoomId(String));
id_newtype!(TaskId(u64));
id_newtype!(LayoutId(u64));
id_newtype!(
    /// Opaque login credential (a v4 UUID string).
    TokenId(String)
);

impl Copy for UserId {}
impl Copy for TaskId {}
impl Copy for LayoutId {}

impl From<&str> for RoomId {
    fn from(s: &str) -> Self {
        RoomId(s.to_string())
    }
}

impl From<String> for RoomId {
    fn from(s: String) -> Self {
        RoomId(s)
    }
}

impl From<&RoomId> for RoomId {
    fn from(r: &RoomId) -> Self {
        r.clone()
    }
}

impl From<&str> for TokenId {
    fn from(s: &str) -> Self {
        TokenId(s.to_string())
    }
}

impl TokenId {
    pub fn generate() -> Self {
        TokenId(uuid::Uuid::new_v4().to_string())
    }
}

/// A single capability flag. The set is closed so typos fail at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    SendText,
    SendImage,
    SendCommand,
    SendPrivate,
    SendImpersonated,
    TypingEvents,
    LiveTyping,
    Annotate,
    LayoutModify,
    RoomAdmin,
    TokenAdmin,
    LogRead,
    VideoPublish,
    VideoSubscribe,
}

impl Permission {
    pub const ALL: [Permission; 14] = [
        Permission::SendText,
        Permission::SendImage,
        Permission::SendCommand,
        Permission::SendPrivate,
        Permission::SendImpersonated,
        Permission::TypingEvents,
        Permission::LiveTyping,
        Permission::Annotate,
        Permission::LayoutModify,
        Permission::RoomAdmin,
        Permission::TokenAdmin,
        Permission::LogRead,
        Permission::VideoPublish,
        Permission::VideoSubscribe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::SendText => "send_text",
            Permission::SendImage => "send_image",
            Permission::SendCommand => "send_command",
            Permission::SendPrivate => "send_private",
            Permission::SendImpersonated => "send_impersonated",
            Permission::TypingEvents => "typing_events",
            Permission::LiveTyping => "live_typing",
            Permission::Annotate => "annotate",
            Permission::LayoutModify => "layout_modify",
            Permission::RoomAdmin => "room_admin",
            Permission::TokenAdmin => "token_admin",
            Permission::LogRead => "log_read",
            Permission::VideoPublish => "video_publish",
            Permission::VideoSubscribe => "video_subscribe",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Permission {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Permission::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown permission `{s}`"))
    }
}

/// A set of [`Permission`] flags. Serializes as a sorted list of names.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PermissionSet(u16);

impl PermissionSet {
    pub const fn empty() -> Self {
        PermissionSet(0)
    }

    pub fn all() -> Self {
        Permission::ALL.into_iter().collect()
    }

    pub fn contains(self, p: Permission) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn insert(&mut self, p: Permission) {
        self.0 |= p.bit();
    }

    pub fn remove(&mut self, p: Permission) {
        self.0 &= !p.bit();
    }

    pub fn union(self, other: Self) -> Self {
        PermissionSet(self.0 | other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        PermissionSet(self.0 & !other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Permission> {
        Permission::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl FromIterator<Permission> for PermissionSet {
    fn from_iter<I: IntoIterator<Item = Permission>>(iter: I) -> Self {
        let mut set = PermissionSet::empty();
        for p in iter {
            set.insert(p);
        }
        set
    }
}

impl<const N: usize> From<[Permission; N]> for PermissionSet {
    fn from(flags: [Permission; N]) -> Self {
        flags.into_iter().collect()
    }
}

impl fmt::Debug for PermissionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for PermissionSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for PermissionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let flags = Vec::<Permission>::deserialize(deserializer)?;
        Ok(flags.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UserKind {
    #[default]
    Human,
    Bot,
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub permissions: PermissionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub login_room_id: Option<RoomId>,
    pub uses_remaining: u32,
    #[serde(default)]
    pub revoked: bool,
    /// Kind of the user this token logs in as.
    #[serde(default)]
    pub kind: UserKind,
    /// Whether a bot logging in with this token shows up in human rosters.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub visible_in_roster: bool,
}

impl Token {
    /// Whether a session login with this token would currently succeed.
    pub fn can_login(&self) -> bool {
        !self.revoked && self.uses_remaining > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub display_name: String,
    pub kind: UserKind,
    pub token_id: TokenId,
    #[serde(default)]
    pub rooms: BTreeSet<RoomId>,
    #[serde(default)]
    pub connected: bool,
    /// Rooms the user occupied when their last session ended; a reconnect
    /// puts them back there instead of the login room.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub resume_rooms: BTreeSet<RoomId>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub visible_in_roster: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub id: RoomId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_id: Option<LayoutId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    #[serde(default)]
    pub members: BTreeSet<UserId>,
    #[serde(default)]
    pub read_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relay_bot_id: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_session: Option<String>,
    /// Advisory role claims, e.g. `concierge` -> user holding it.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub claims: std::collections::BTreeMap<String, UserId>,
}

impl Room {
    pub fn new(id: RoomId, layout_id: Option<LayoutId>, task_id: Option<TaskId>) -> Self {
        Room {
            id,
            layout_id,
            task_id,
            members: BTreeSet::new(),
            read_only: false,
            relay_bot_id: None,
            video_session: None,
            claims: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub name: String,
    pub num_users: u32,
    pub layout_id: Option<LayoutId>,
}

/// True iff `action` is granted by a live token.
pub fn token_allows(token: &Token, action: Permission) -> bool {
    !token.revoked && token.permissions.contains(action)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Allow,
    Deny,
}

/// Humans occupy at most one room; re-joining the current room is allowed.
pub fn can_join(user: &User, room: &RoomId) -> Admission {
    match user.kind {
        UserKind::Human if !user.rooms.is_empty() && !user.rooms.contains(room) => Admission::Deny,
        _ => Admission::Allow,
    }
}
