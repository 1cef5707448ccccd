//! Waiting-room matchmaking.
//!
//! [`Matchmaker`] is the pure queue logic; [`Concierge`] wires it to a bot
//! session. Time only enters through arrival timestamps and [`Matchmaker::tick`],
//! so tests drive it with a manual clock.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use colloquy_core::clock::Clock;
use colloquy_core::event::{EventType, JoinedPayload, LeftPayload};
use colloquy_core::model::{LayoutId, RoomId, TaskId, UserId, UserKind};
use colloquy_core::wire::EventFrame;
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::json;

use crate::codes;
use crate::sdk::{Bot, SdkError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waiter {
    pub user: UserId,
    pub since_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// These users, in arrival order, get a room together.
    Group { task: TaskId, users: Vec<UserId> },
    /// Waited too long; compensate and stop matching.
    Timeout { task: TaskId, user: UserId },
}

#[derive(Debug, Clone)]
pub struct Matchmaker {
    timeout_ms: i64,
    task_timeout_ms: HashMap<TaskId, i64>,
    queues: BTreeMap<TaskId, VecDeque<Waiter>>,
    queued: HashMap<UserId, TaskId>,
    /// Users already grouped or timed out. They are never matched again.
    done: HashSet<UserId>,
}

impl Matchmaker {
    pub fn new(timeout: Duration) -> Self {
        Matchmaker {
            timeout_ms: timeout.as_millis() as i64,
            task_timeout_ms: HashMap::new(),
            queues: BTreeMap::new(),
            queued: HashMap::new(),
            done: HashSet::new(),
        }
    }

    pub fn set_task_timeout(&mut self, task: TaskId, timeout: Duration) {
        self.task_timeout_ms.insert(task, timeout.as_millis() as i64);
    }

    fn timeout_of(&self, task: TaskId) -> i64 {
        self.task_timeout_ms.get(&task).copied().unwrap_or(self.timeout_ms)
    }

    /// Enqueues at the tail. A full quota forms a group from the head.
    pub fn arrive(&mut self, user: UserId, task: TaskId, quota: u32, now_ms: i64) -> Option<Action> {
        if self.done.contains(&user) || self.queued.contains_key(&user) {
            return None;
        }
        let q = self.queues.entry(task).or_default();
        q.push_back(Waiter { user, since_ms: now_ms });
        self.queued.insert(user, task);
        let quota = quota.max(1) as usize;
        if q.len() < quota {
            return None;
        }
        let users: Vec<UserId> = q.drain(..quota).map(|w| w.user).collect();
        for u in &users {
            self.queued.remove(u);
            self.done.insert(*u);
        }
        Some(Action::Group { task, users })
    }

    /// Drops a waiter who left. Returns whether they were queued.
    pub fn depart(&mut self, user: UserId) -> bool {
        let Some(task) = self.queued.remove(&user) else { return false };
        if let Some(q) = self.queues.get_mut(&task) {
            q.retain(|w| w.user != user);
        }
        true
    }

    /// Times out everyone who has waited at least the timeout.
    pub fn tick(&mut self, now_ms: i64) -> Vec<Action> {
        let mut out = Vec::new();
        for (task, q) in &mut self.queues {
            let limit = self.task_timeout_ms.get(task).copied().unwrap_or(self.timeout_ms);
            while q.front().is_some_and(|w| now_ms - w.since_ms >= limit) {
                let w = q.pop_front().expect("front exists");
                self.queued.remove(&w.user);
                self.done.insert(w.user);
                out.push(Action::Timeout { task: *task, user: w.user });
            }
        }
        out
    }

    pub fn waiting(&self, task: TaskId) -> Vec<UserId> {
        self.queues.get(&task).map(|q| q.iter().map(|w| w.user).collect()).unwrap_or_default()
    }

    pub fn is_waiting(&self, user: UserId) -> bool {
        self.queued.contains_key(&user)
    }

    pub fn next_deadline(&self) -> Option<i64> {
        self.queues.iter().filter_map(|(t, q)| q.front().map(|w| w.since_ms + self.timeout_of(*t))).min()
    }
}

#[derive(Debug, Clone)]
pub struct ConciergeConfig {
    pub waiting_room: RoomId,
    pub timeout: Duration,
    pub per_task_timeout: HashMap<TaskId, Duration>,
    pub code_secret: Vec<u8>,
    pub code_prefix: String,
}

impl ConciergeConfig {
    pub fn new(waiting_room: impl Into<RoomId>) -> Self {
        ConciergeConfig {
            waiting_room: waiting_room.into(),
            timeout: DEFAULT_TIMEOUT,
            per_task_timeout: HashMap::new(),
            code_secret: b"colloquy".to_vec(),
            code_prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct TaskInfo {
    num_users: u32,
    layout_id: Option<LayoutId>,
}

/// A formed group, as recorded by the concierge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formed {
    pub room: RoomId,
    pub task: TaskId,
    pub users: Vec<UserId>,
}

struct State {
    matchmaker: Matchmaker,
    tasks: HashMap<TaskId, TaskInfo>,
    task_bots: HashMap<TaskId, Vec<UserId>>,
    formed: Vec<Formed>,
    timed_out: Vec<(UserId, String)>,
}

#[derive(Clone)]
pub struct Concierge {
    bot: Bot,
    config: Arc<ConciergeConfig>,
    clock: Arc<dyn Clock>,
    state: Arc<Mutex<State>>,
}

impl Concierge {
    /// Claims the waiting room and installs the handlers. Call
    /// [`Bot::start`] afterwards.
    pub async fn attach(bot: Bot, config: ConciergeConfig, clock: Arc<dyn Clock>) -> anyhow::Result<Concierge> {
        let path = format!("/rooms/{}/claim", config.waiting_room);
        let holder = bot.api("POST", &path, Some(&json!({"role": "concierge"}))).await.context("claiming the waiting room")?;
        anyhow::ensure!(holder["holder"].as_u64() == Some(bot.id().0), "waiting room is served by another concierge");
        let mut matchmaker = Matchmaker::new(config.timeout);
        for (task, t) in &config.per_task_timeout {
            matchmaker.set_task_timeout(*task, *t);
        }
        let state = State {
            matchmaker,
            tasks: HashMap::new(),
            task_bots: HashMap::new(),
            formed: Vec::new(),
            timed_out: Vec::new(),
        };
        let c = Concierge { bot: bot.clone(), config: Arc::new(config), clock, state: Arc::new(Mutex::new(state)) };
        let me = c.clone();
        bot.on(EventType::Joined, move |_, ev| {
            let me = me.clone();
            async move { me.on_joined(ev).await }
        });
        let me = c.clone();
        bot.on(EventType::Left, move |_, ev| {
            let me = me.clone();
            async move {
                me.on_left(&ev);
                Ok(())
            }
        });
        Ok(c)
    }

    pub fn bot(&self) -> &Bot {
        &self.bot
    }

    pub fn waiting(&self, task: TaskId) -> Vec<UserId> {
        self.state.lock().matchmaker.waiting(task)
    }

    pub fn formed(&self) -> Vec<Formed> {
        self.state.lock().formed.clone()
    }

    /// (user, code) for every waiter compensated so far.
    pub fn timed_out(&self) -> Vec<(UserId, String)> {
        self.state.lock().timed_out.clone()
    }

    pub fn code_for(&self, room: &RoomId, user: UserId) -> String {
        format!("{}{}", self.config.code_prefix, codes::code(&self.config.code_secret, room, user))
    }

    async fn task_info(&self, task: TaskId) -> Result<TaskInfo, SdkError> {
        if let Some(t) = self.state.lock().tasks.get(&task) {
            return Ok(t.clone());
        }
        let v = self.bot.api("GET", &format!("/tasks/{task}"), None).await?;
        let info: TaskInfo = serde_json::from_value(v).map_err(|e| SdkError::Transport(e.to_string()))?;
        self.state.lock().tasks.insert(task, info.clone());
        Ok(info)
    }

    async fn on_joined(&self, ev: EventFrame) -> anyhow::Result<()> {
        if ev.room != self.config.waiting_room {
            return Ok(());
        }
        let p: JoinedPayload = serde_json::from_value(ev.payload.clone())?;
        if p.user == self.bot.id() {
            return Ok(());
        }
        match (p.kind, p.task) {
            (UserKind::Bot, Some(task)) => {
                let mut st = self.state.lock();
                let bots = st.task_bots.entry(task).or_default();
                if !bots.contains(&p.user) {
                    bots.push(p.user);
                }
            }
            (UserKind::Bot, None) => {}
            (UserKind::Human, None) => {
                self.bot
                    .whisper(&ev.room, p.user, "Your link is not tied to a task, so you cannot be matched with a partner. Please check the link you were given.")
                    .await?;
            }
            (UserKind::Human, Some(task)) => {
                let info = self.task_info(task).await?;
                let action = self.state.lock().matchmaker.arrive(p.user, task, info.num_users, ev.timestamp.millis());
                if let Some(Action::Group { task, users }) = action {
                    self.form(task, &info, users).await?;
                }
            }
        }
        Ok(())
    }

    fn on_left(&self, ev: &EventFrame) {
        if ev.room != self.config.waiting_room {
            return;
        }
        if let Ok(p) = serde_json::from_value::<LeftPayload>(ev.payload.clone()) {
            let mut st = self.state.lock();
            st.matchmaker.depart(p.user);
            for bots in st.task_bots.values_mut() {
                bots.retain(|b| *b != p.user);
            }
        }
    }

    async fn form(&self, task: TaskId, info: &TaskInfo, users: Vec<UserId>) -> anyhow::Result<()> {
        let room = self.bot.api("POST", "/rooms", Some(&json!({"task_id": task, "layout_id": info.layout_id}))).await?;
        let room: RoomId = room["id"].as_str().context("room id")?.into();
        let bots = self.state.lock().task_bots.get(&task).cloned().unwrap_or_default();
        // Task bots go first so they see the players arrive.
        for b in bots {
            if let Err(e) = self.bot.api("POST", &format!("/users/{b}/move"), Some(&json!({"to": room}))).await {
                tracing::warn!("task bot {b} could not join {room}: {e}");
            }
        }
        for u in &users {
            let body = json!({"from": self.config.waiting_room, "to": room});
            if let Err(e) = self.bot.api("POST", &format!("/users/{u}/move"), Some(&body)).await {
                tracing::warn!("user {u} could not be moved to {room}: {e}");
            }
        }
        tracing::info!("task {task}: room {room} for {users:?}");
        self.state.lock().formed.push(Formed { room, task, users });
        Ok(())
    }

    /// Applies timeouts as of the clock's current time.
    pub async fn tick(&self) -> anyhow::Result<Vec<Action>> {
        let now = self.clock.now_ms();
        let actions = self.state.lock().matchmaker.tick(now);
        for a in &actions {
            if let Action::Timeout { user, .. } = a {
                let room = &self.config.waiting_room;
                let code = self.code_for(room, *user);
                self.bot.issue_code(room, *user, &code, Some("waiting_timeout")).await?;
                let text = format!("Sorry, no partner showed up in time. Use this code to get paid for your waiting time: {code}");
                self.bot.whisper(room, *user, &text).await?;
                self.state.lock().timed_out.push((*user, code));
            }
        }
        Ok(actions)
    }

    /// Calls [`Concierge::tick`] every `every` until the bot closes.
    pub fn spawn_timer(&self, every: Duration) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let mut iv = tokio::time::interval(every);
            loop {
                tokio::select! {
                    _ = iv.tick() => {
                        if let Err(e) = me.tick().await {
                            tracing::warn!("timeout handling failed: {e:#}");
                        }
                    }
                    _ = me.bot.closed() => return,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN5: i64 = 300_000;

    #[test]
    fn groups_form_from_the_head() {
        let mut m = Matchmaker::new(DEFAULT_TIMEOUT);
        assert_eq!(m.arrive(UserId(1), TaskId(1), 2, 0), None);
        assert_eq!(m.arrive(UserId(2), TaskId(1), 2, 1), Some(Action::Group { task: TaskId(1), users: vec![UserId(1), UserId(2)] }));
        assert_eq!(m.arrive(UserId(3), TaskId(1), 2, 2), None);
        assert_eq!(m.arrive(UserId(4), TaskId(1), 2, 3), Some(Action::Group { task: TaskId(1), users: vec![UserId(3), UserId(4)] }));
        // Done users are ignored on a second arrival.
        assert_eq!(m.arrive(UserId(1), TaskId(1), 2, 4), None);
        assert!(m.waiting(TaskId(1)).is_empty());
    }

    #[test]
    fn quota_one_groups_immediately() {
        let mut m = Matchmaker::new(DEFAULT_TIMEOUT);
        for u in 0..3 {
            assert_eq!(m.arrive(UserId(u), TaskId(9), 1, 0), Some(Action::Group { task: TaskId(9), users: vec![UserId(u)] }));
        }
    }

    #[test]
    fn timeout_boundary() {
        let mut m = Matchmaker::new(DEFAULT_TIMEOUT);
        m.arrive(UserId(1), TaskId(1), 2, 1000);
        assert!(m.tick(1000 + MIN5 - 1).is_empty());
        assert_eq!(m.tick(1000 + MIN5), vec![Action::Timeout { task: TaskId(1), user: UserId(1) }]);
        assert!(m.tick(1000 + 2 * MIN5).is_empty());

        let mut m = Matchmaker::new(DEFAULT_TIMEOUT);
        m.arrive(UserId(1), TaskId(1), 2, 0);
        assert!(m.arrive(UserId(2), TaskId(1), 2, MIN5 - 1).is_some());
        assert!(m.tick(MIN5).is_empty());
    }

    #[test]
    fn departure_and_return_goes_to_the_tail() {
        let mut m = Matchmaker::new(DEFAULT_TIMEOUT);
        m.arrive(UserId(1), TaskId(1), 3, 0);
        m.arrive(UserId(2), TaskId(1), 3, 1);
        assert!(m.depart(UserId(1)));
        assert!(!m.depart(UserId(1)));
        m.arrive(UserId(1), TaskId(1), 3, 2);
        assert_eq!(m.waiting(TaskId(1)), vec![UserId(2), UserId(1)]);
        assert_eq!(m.next_deadline(), Some(1 + MIN5));
    }
}
