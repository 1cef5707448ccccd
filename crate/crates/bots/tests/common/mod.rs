#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use colloquy_bots::concierge::{Concierge, ConciergeConfig};
use colloquy_bots::sdk::{Backoff, Bot, BotConfig, Endpoint};
use colloquy_core::api::ApiRequest;
use colloquy_core::clock::{Clock, ManualClock, SystemClock};
use colloquy_core::event::EventType;
use colloquy_core::gateway::Gateway;
use colloquy_core::hub::{Hub, HubConfig};
use colloquy_core::wire::EventFrame;
use parking_lot::Mutex;
use serde_json::{json, Value};

pub struct World {
    pub gw: Arc<Gateway>,
    pub admin: String,
}

impl World {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(SystemClock))
    }

    pub fn manual(start_ms: i64) -> (Self, ManualClock) {
        let clock = ManualClock::new(start_ms);
        (Self::with_clock(Arc::new(clock.clone())), clock)
    }

    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        let hub = Hub::in_memory(clock, HubConfig::default()).unwrap();
        let admin = hub.admin_token().0.clone();
        World { gw: Arc::new(Gateway::with_capacity(hub, 1 << 16)), admin }
    }

    pub fn call(&self, method: &str, path: &str, body: Value) -> Value {
        let r = self.gw.api(&ApiRequest::new(method, path).bearer(&self.admin).json(&body));
        assert!(r.status < 300, "{method} {path}: {} {:?}", r.status, r.json());
        r.json()
    }

    pub fn layout(&self, source: &str) -> u64 {
        let r = self.gw.api(&ApiRequest::new("POST", "/layouts").bearer(&self.admin).body(source));
        assert_eq!(r.status, 201, "{:?}", r.json());
        r.json()["id"].as_u64().unwrap()
    }

    pub fn room(&self, id: &str) {
        self.call("POST", "/rooms", json!({ "id": id }));
    }

    pub fn task(&self, name: &str, k: u32, layout: Option<u64>) -> u64 {
        self.call("POST", "/tasks", json!({"name": name, "num_users": k, "layout_id": layout}))["id"].as_u64().unwrap()
    }

    pub fn token(&self, body: Value) -> String {
        self.call("POST", "/tokens", body)["id"].as_str().unwrap().to_string()
    }

    pub fn human_token(&self, room: &str, task: Option<u64>) -> String {
        self.token(json!({
            "permissions": ["send_text", "send_private", "send_command", "typing_events"],
            "login_room_id": room, "task_id": task, "uses": 10
        }))
    }

    pub fn bot_token(&self, room: &str, perms: &[&str], task: Option<u64>) -> String {
        self.token(json!({"permissions": perms, "login_room_id": room, "task_id": task, "kind": "bot", "uses": 10}))
    }

    pub fn config(&self, token: &str, name: &str) -> BotConfig {
        let mut c = BotConfig::new(Endpoint::Local(self.gw.clone()), token).name(name);
        c.backoff = Backoff { base: Duration::from_millis(5), factor: 2.0, cap: Duration::from_millis(50) };
        c
    }

    pub async fn connect(&self, token: &str, name: &str) -> Bot {
        Bot::connect(self.config(token, name)).await.unwrap()
    }

    /// A started client that records every event it is handed.
    pub async fn client(&self, token: &str, name: &str) -> (Bot, Transcript) {
        let bot = self.connect(token, name).await;
        let t = Transcript::attach(&bot);
        bot.start();
        (bot, t)
    }

    pub fn log(&self, room: &str) -> Vec<colloquy_core::event::LogEntry> {
        self.gw.with_hub(|h, _| h.log().entries(&room.into()).unwrap().to_vec())
    }
}

#[derive(Clone, Default)]
pub struct Transcript(pub Arc<Mutex<Vec<EventFrame>>>);

impl Transcript {
    pub fn attach(bot: &Bot) -> Self {
        let t = Transcript::default();
        let sink = t.clone();
        bot.on_any(move |_, ev| {
            let sink = sink.clone();
            async move {
                sink.0.lock().push(ev);
                Ok(())
            }
        });
        t
    }

    pub fn events(&self) -> Vec<EventFrame> {
        self.0.lock().clone()
    }

    pub fn of(&self, ty: EventType) -> Vec<EventFrame> {
        self.0.lock().iter().filter(|e| e.event_type == ty).cloned().collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.of(EventType::TextMessage).iter().map(|e| e.payload["text"].as_str().unwrap().to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }
}

/// Polls until `cond` holds or five seconds pass.
pub async fn eventually(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(tokio::time::Instant::now() < deadline, "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
}

pub const DITO_LAYOUT: &str = r#"{"title":"DiTo","html":[{"layout-type":"image","id":"image"}],"scripts":{"incoming-text":"display-text"}}"#;

pub const CONCIERGE_PERMS: &[&str] = &["room_admin", "send_text", "send_private"];

/// A waiting room watched by a started concierge, with one `k`-quota task.
pub struct Lobby {
    pub w: World,
    pub task: u64,
    pub concierge: Concierge,
}

pub async fn lobby(k: u32, timeout: Duration) -> Lobby {
    lobby_in(World::new(), Arc::new(SystemClock), k, timeout).await
}

pub async fn lobby_in(w: World, clock: Arc<dyn Clock>, k: u32, timeout: Duration) -> Lobby {
    w.room("waiting");
    let layout = w.layout(DITO_LAYOUT);
    let task = w.task("dito", k, Some(layout));
    let cbot = w.connect(&w.bot_token("waiting", CONCIERGE_PERMS, None), "concierge").await;
    let mut config = ConciergeConfig::new("waiting");
    config.timeout = timeout;
    let concierge = Concierge::attach(cbot.clone(), config, clock).await.unwrap();
    cbot.start();
    Lobby { w, task, concierge }
}
