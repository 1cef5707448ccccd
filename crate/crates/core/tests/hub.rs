use std::sync::Arc;

use colloquy_core::api::ApiRequest;
use colloquy_core::clock::ManualClock;
use colloquy_core::event::{EventType, LogEntry};
use colloquy_core::gateway::{Connection, Delivery, Gateway};
use colloquy_core::hub::{Hub, HubConfig};
use colloquy_core::model::{Permission, PermissionSet, UserId};
use colloquy_core::wire::{ClientFrame, ControlFrame, EventFrame, Receipt, ServerFrame, CLOSE_KICKED};
use serde_json::{json, Value};

struct World {
    gw: Gateway,
    admin: String,
}

impl World {
    fn new() -> Self {
        let hub = Hub::in_memory(Arc::new(ManualClock::new(1_000)), HubConfig::default()).unwrap();
        let admin = hub.admin_token().0.clone();
        World { gw: Gateway::new(hub), admin }
    }

    fn api(&self, method: &str, path: &str, body: Value) -> (u16, Value) {
        let r = self.gw.api(&ApiRequest::new(method, path).bearer(&self.admin).json(&body));
        (r.status, r.json())
    }

    fn room(&self, id: &str) {
        let (s, b) = self.api("POST", "/rooms", json!({"id": id}));
        assert_eq!(s, 201, "{b}");
    }

    fn token(&self, perms: &[&str], room: &str, kind: &str) -> String {
        let (s, b) = self.api("POST", "/tokens", json!({"permissions": perms, "login_room_id": room, "kind": kind, "uses": 5}));
        assert_eq!(s, 201, "{b}");
        b["id"].as_str().unwrap().to_string()
    }

    fn login(&self, token: &str, name: &str) -> Client {
        let c = self.gw.connect(token, Some(name)).unwrap();
        Client { conn: c, seen: Vec::new() }
    }
}

struct Client {
    conn: Connection,
    seen: Vec<Delivery>,
}

impl Client {
    fn id(&self) -> UserId {
        self.conn.user
    }

    fn drain(&mut self) -> Vec<Delivery> {
        let mut got = Vec::new();
        while let Ok(d) = self.conn.rx.try_recv() {
            got.push(d.clone());
            self.seen.push(d);
        }
        got
    }

    fn events(&mut self) -> Vec<EventFrame> {
        self.drain()
            .into_iter()
            .filter_map(|d| match d {
                Delivery::Frame(ServerFrame::Event(e)) => Some(e),
                _ => None,
            })
            .collect()
    }

    fn send(&mut self, gw: &Gateway, frame: ClientFrame) -> Receipt {
        gw.submit(self.conn.session, frame);
        let mut last = None;
        for d in self.drain() {
            if let Delivery::Frame(ServerFrame::Control(ControlFrame::Receipt(r))) = d {
                last = Some(r);
            }
        }
        last.expect("receipt")
    }
}

fn text(room: &str, t: &str) -> ClientFrame {
    ClientFrame::new(EventType::TextMessage, room, json!({"text": t}))
}

fn texts(events: &[EventFrame]) -> Vec<String> {
    events
        .iter()
        .filter(|e| e.event_type == EventType::TextMessage)
        .map(|e| e.payload["text"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn broadcast_and_private_text() {
    let w = World::new();
    w.room("lobby");
    let perms = ["send_text", "send_private"];
    let mut a = w.login(&w.token(&perms, "lobby", "human"), "A");
    let mut b = w.login(&w.token(&perms, "lobby", "human"), "B");
    let mut c = w.login(&w.token(&perms, "lobby", "human"), "C");
    for cl in [&mut a, &mut b, &mut c] {
        cl.drain();
    }

    let r = a.send(&w.gw, text("lobby", "hello"));
    assert!(r.ok, "{r:?}");
    assert_eq!(texts(&b.events()), ["hello"]);
    assert_eq!(texts(&c.events()), ["hello"]);

    let r = a.send(&w.gw, text("lobby", "psst").to(b.id()).with_id("p1"));
    assert!(r.ok);
    assert_eq!(r.id.as_deref(), Some("p1"));
    assert_eq!(texts(&b.events()), ["psst"]);
    assert!(c.events().is_empty());
    // The sender sees its own message before the receipt.
    let own: Vec<_> = a.seen.iter().rev().take(2).collect();
    assert!(matches!(own[0], Delivery::Frame(ServerFrame::Control(ControlFrame::Receipt(_)))));
    assert!(matches!(own[1], Delivery::Frame(ServerFrame::Event(e)) if e.payload["text"] == "psst"));
}

#[test]
fn gateway_rejections() {
    let w = World::new();
    w.room("r");
    let mut a = w.login(&w.token(&["send_text"], "r", "human"), "A");
    let mut b = w.login(&w.token(&[], "r", "human"), "B");
    a.drain();
    b.drain();

    let code = |r: Receipt| r.error.unwrap().code;
    assert_eq!(code(b.send(&w.gw, text("r", "hi"))), "permission_denied");
    assert_eq!(code(a.send(&w.gw, text("r", "  "))), "validation");
    assert_eq!(code(a.send(&w.gw, text("r", "x").to(b.id()))), "permission_denied");
    assert_eq!(code(a.send(&w.gw, text("elsewhere", "x"))), "not_found");
    let big = "x".repeat(16 * 1024 + 1);
    assert_eq!(code(a.send(&w.gw, text("r", &big))), "validation");
    let r = a.send(&w.gw, ClientFrame { event_type: "shout".into(), ..text("r", "x") });
    assert_eq!(r.error.unwrap().path.as_deref(), Some("type"));
    let r = a.send(&w.gw, ClientFrame::new(EventType::Joined, "r", json!({})));
    assert_eq!(code(r), "validation");
    // Impersonation is bot-only.
    let r = a.send(&w.gw, ClientFrame::new(EventType::TextMessage, "r", json!({"text": "x", "as_user": b.id()})));
    assert_eq!(code(r), "permission_denied");
    assert!(b.events().is_empty());

    w.gw.submit_text(a.conn.session, "{not json");
    let last = a.drain().pop().unwrap();
    assert!(matches!(last, Delivery::Frame(ServerFrame::Control(ControlFrame::Receipt(Receipt { ok: false, .. })))));

    let (s, _) = w.api("POST", "/rooms/r/close", json!({}));
    assert_eq!(s, 200);
    let before = w.gw.with_hub(|h, _| h.log().entries(&"r".into()).unwrap().len());
    assert_eq!(code(a.send(&w.gw, text("r", "late"))), "read_only");
    let after = w.gw.with_hub(|h, _| h.log().entries(&"r".into()).unwrap().to_vec());
    assert_eq!(after.len(), before);
    assert_eq!(after.last().unwrap().event_type, EventType::RoomClosed);
    assert_eq!(w.api("POST", "/rooms/r/close", json!({})).0, 409);
}

#[test]
fn commands_reach_bots_only() {
    let w = World::new();
    w.room("r");
    let mut h1 = w.login(&w.token(&["send_command"], "r", "human"), "H1");
    let mut h2 = w.login(&w.token(&[], "r", "human"), "H2");
    let mut bot = w.login(&w.token(&[], "r", "bot"), "Bot");
    for c in [&mut h1, &mut h2, &mut bot] {
        c.drain();
    }
    let r = h1.send(&w.gw, ClientFrame::new(EventType::Command, "r", json!({"command": "/difference", "args": ["the", "cube"]})));
    assert!(r.ok, "{r:?}");
    assert!(h2.events().is_empty());
    let got = bot.events();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].payload, json!({"command": "difference", "args": ["the", "cube"]}));
}

#[test]
fn join_sends_room_state_then_joined() {
    let w = World::new();
    w.room("r");
    let mut a = w.login(&w.token(&["send_text"], "r", "human"), "A");
    a.send(&w.gw, text("r", "first"));
    let mut b = w.login(&w.token(&[], "r", "human"), "B");
    let got = b.drain();
    assert!(matches!(&got[0], Delivery::Frame(ServerFrame::Control(ControlFrame::Session { .. }))));
    let Delivery::Frame(ServerFrame::Control(ControlFrame::RoomState(state))) = &got[1] else { panic!("{got:?}") };
    assert_eq!(texts(&state.history), ["first"]);
    assert_eq!(state.members.len(), 2);
    let Delivery::Frame(ServerFrame::Event(joined)) = &got[2] else { panic!() };
    assert_eq!(joined.event_type, EventType::Joined);
    assert_eq!(joined.seq, state.last_seq + 1);
}

#[test]
fn disconnect_synthesizes_typing_stop_and_reconnect_resumes() {
    let w = World::new();
    w.room("a");
    w.room("b");
    let tok = w.token(&["typing_events"], "a", "human");
    let mut u = w.login(&tok, "U");
    let mut peer = w.login(&w.token(&[], "a", "human"), "P");
    // Move u to b so a reconnect must return there, not to the login room.
    let uid = u.id();
    let (s, body) = w.api("POST", &format!("/users/{uid}/move"), json!({"from": "a", "to": "b"}));
    assert_eq!(s, 200, "{body}");
    let (s, _) = w.api("POST", &format!("/users/{}/move", peer.id()), json!({"from": "a", "to": "b"}));
    assert_eq!(s, 200);
    u.drain();
    peer.drain();

    assert!(u.send(&w.gw, ClientFrame::new(EventType::TypingStarted, "b", json!({}))).ok);
    w.gw.disconnect(u.conn.session);
    let kinds: Vec<EventType> = peer.events().iter().map(|e| e.event_type).collect();
    assert_eq!(kinds, [EventType::TypingStarted, EventType::TypingStopped, EventType::Left]);

    let log = w.gw.with_hub(|h, _| h.log().entries(&"b".into()).unwrap().to_vec());
    let lefts = log.iter().filter(|e| e.event_type == EventType::Left && e.payload["user"] == uid.0).count();
    assert_eq!(lefts, 1);

    let mut again = w.login(&tok, "U");
    assert_eq!(again.id(), uid);
    let joined: Vec<EventFrame> = again.events();
    assert_eq!(joined[0].room.0, "b");
}

#[test]
fn reconnect_supersedes_old_session() {
    let w = World::new();
    w.room("r");
    let tok = w.token(&[], "r", "human");
    let mut first = w.login(&tok, "U");
    let second = w.login(&tok, "U");
    assert_eq!(first.id(), second.id());
    let got = first.drain();
    assert!(got.iter().any(|d| matches!(d, Delivery::Close(CLOSE_KICKED, _))));
    let members = w.gw.with_hub(|h, _| h.room(&"r".into()).unwrap().members.clone());
    assert_eq!(members.into_iter().collect::<Vec<_>>(), [second.id()]);
}

#[test]
fn token_uses_are_counted() {
    let w = World::new();
    w.room("r");
    let (_, b) = w.api("POST", "/tokens", json!({"permissions": ["send_text"], "login_room_id": "r", "uses": 1}));
    let tok = b["id"].as_str().unwrap();
    let c = w.gw.connect(tok, None).unwrap();
    w.gw.disconnect(c.session);
    let err = w.gw.connect(tok, None).unwrap_err();
    assert_eq!(err.close_code(), 4002);
    assert_eq!(w.gw.connect("nope", None).unwrap_err().close_code(), 4001);
}

#[test]
fn revoke_kicks_holder() {
    let w = World::new();
    w.room("r");
    let tok = w.token(&["send_text"], "r", "human");
    let mut u = w.login(&tok, "U");
    let mut bot = w.login(&w.token(&[], "r", "bot"), "B");
    u.drain();
    bot.drain();
    let (s, _) = w.api("DELETE", &format!("/tokens/{tok}"), json!({}));
    assert_eq!(s, 200);
    let got = u.drain();
    assert!(matches!(got.last(), Some(Delivery::Close(CLOSE_KICKED, _))));
    let ev = bot.events();
    assert_eq!(ev[0].event_type, EventType::PermissionUpdate);
    assert_eq!(ev[0].payload["revoked"], true);
    assert_eq!(ev[1].event_type, EventType::Left);
    assert_eq!(w.gw.connect(&tok, None).unwrap_err().close_code(), 4001);
}

#[test]
fn permission_patch_folds_and_is_logged() {
    let w = World::new();
    w.room("r");
    let tok = w.token(&["send_text"], "r", "human");
    let mut u = w.login(&tok, "U");
    u.drain();
    let (s, b) = w.api("PATCH", &format!("/tokens/{tok}/permissions"), json!({"remove": ["send_text"]}));
    assert_eq!(s, 200);
    assert_eq!(b["permissions"], json!([]));
    assert!(!u.send(&w.gw, text("r", "x")).ok);
    let (_, b) = w.api("PATCH", &format!("/users/{}/permissions", u.id()), json!({"add": ["send_text", "annotate"], "remove": ["annotate"]}));
    assert_eq!(b["permissions"], json!(["send_text"]));
    assert!(u.send(&w.gw, text("r", "x")).ok);
    let updates = w.gw.with_hub(|h, _| {
        h.log().entries(&"r".into()).unwrap().iter().filter(|e| e.event_type == EventType::PermissionUpdate).count()
    });
    assert_eq!(updates, 2);
    assert_eq!(w.api("PATCH", "/tokens/missing/permissions", json!({})).0, 404);
}

#[test]
fn bots_join_many_rooms_humans_one() {
    let w = World::new();
    for r in ["a", "b", "c"] {
        w.room(r);
    }
    let bot = w.login(&w.token(&[], "a", "bot"), "Bot");
    let human = w.login(&w.token(&[], "a", "human"), "H");
    for r in ["b", "c"] {
        let (s, _) = w.api("POST", &format!("/users/{}/move", bot.id()), json!({"to": r}));
        assert_eq!(s, 200);
    }
    assert_eq!(w.gw.with_hub(|h, _| h.user(bot.id()).unwrap().rooms.len()), 3);
    let (s, b) = w.api("POST", &format!("/users/{}/move", human.id()), json!({"to": "b"}));
    assert_eq!(s, 409);
    assert_eq!(b["error"]["code"], "membership_violation");
    let (s, _) = w.api("POST", &format!("/users/{}/move", human.id()), json!({"from": "a", "to": "b"}));
    assert_eq!(s, 200);
}

#[test]
fn relay_routes_humans_through_bot() {
    let w = World::new();
    w.room("r");
    let mut a = w.login(&w.token(&["send_text"], "r", "human"), "A");
    let mut b = w.login(&w.token(&["send_text"], "r", "human"), "B");
    let bot_tok = w.token(&["room_admin", "send_impersonated"], "r", "bot");
    let mut bot = w.login(&bot_tok, "Relay");
    for c in [&mut a, &mut b, &mut bot] {
        c.drain();
    }
    // A human caller is refused.
    let r = w.gw.api(&ApiRequest::new("POST", "/rooms/r/relay").bearer(&w.admin).json(&json!({"enabled": true})));
    assert_eq!(r.status, 403);
    let r = w.gw.api(&ApiRequest::new("POST", "/rooms/r/relay").bearer(&bot_tok).json(&json!({"enabled": true})));
    assert_eq!(r.status, 200, "{:?}", r.json());
    for c in [&mut a, &mut b, &mut bot] {
        c.drain();
    }

    assert!(a.send(&w.gw, text("r", "hi there")).ok);
    assert!(b.events().is_empty());
    let got = bot.events();
    assert_eq!(got[0].actor, Some(a.id()));
    let fwd = ClientFrame::new(EventType::TextMessage, "r", json!({"text": "hi", "as_user": a.id()}));
    assert!(bot.send(&w.gw, fwd).ok);
    let seen = b.events();
    assert_eq!(texts(&seen), ["hi"]);
    assert_eq!((seen[0].actor, seen[0].displayed_actor), (Some(a.id()), None));
    // A does not receive its own line twice.
    assert!(a.events().is_empty());
    let log: Vec<LogEntry> = w.gw.with_hub(|h, _| h.log().entries(&"r".into()).unwrap().to_vec());
    let last = log.last().unwrap();
    assert_eq!((last.actor, last.displayed_actor), (Some(bot.id()), Some(a.id())));

    // History for a late human hides the intercepted original.
    let late = w.token(&[], "r", "human");
    let mut c = w.login(&late, "C");
    let state = c
        .drain()
        .into_iter()
        .find_map(|d| match d {
            Delivery::Frame(ServerFrame::Control(ControlFrame::RoomState(s))) => Some(s),
            _ => None,
        })
        .unwrap();
    assert_eq!(texts(&state.history), ["hi"]);
    assert_eq!(state.history[0].actor, Some(a.id()));
}

#[test]
fn display_updates_scope_and_late_join() {
    let w = World::new();
    let layout = r#"{"title":"T","html":[{"layout-type":"image","id":"img"},{"layout-type":"div","id":"note"}],"scripts":{"incoming-text":"display-text"}}"#;
    let r = w.gw.api(&ApiRequest::new("POST", "/layouts").bearer(&w.admin).body(layout));
    assert_eq!(r.status, 201);
    let lid = r.json()["id"].as_u64().unwrap();
    let got = w.gw.api(&ApiRequest::new("GET", &format!("/layouts/{lid}")).bearer(&w.admin));
    assert_eq!(got.text(), layout);
    w.api("POST", "/rooms", json!({"id": "r", "layout_id": lid}));

    let mut a = w.login(&w.token(&[], "r", "human"), "A");
    let mut b = w.login(&w.token(&[], "r", "human"), "B");
    let mut bot = w.login(&w.token(&["layout_modify"], "r", "bot"), "Bot");
    for c in [&mut a, &mut b, &mut bot] {
        c.drain();
    }
    let upd = |scope: Value, m: &str, v: Value| {
        ClientFrame::new(EventType::DisplayUpdate, "r", json!({"element": "img", "mutation": m, "value": v, "scope": scope}))
    };
    assert!(bot.send(&w.gw, upd(json!("room"), "set_image_src", json!("http://x/1.png"))).ok);
    assert!(bot.send(&w.gw, upd(json!(a.id()), "set_visible", json!(false))).ok);
    assert_eq!(a.events().len(), 2);
    assert_eq!(b.events().len(), 1);
    let bad = ClientFrame::new(EventType::DisplayUpdate, "r", json!({"element": "note", "mutation": "set_image_src", "value": "u"}));
    assert_eq!(bot.send(&w.gw, bad).error.unwrap().path.as_deref(), Some("payload.mutation"));
    let bad = ClientFrame::new(EventType::DisplayUpdate, "r", json!({"element": "nope", "mutation": "set_text", "value": "u"}));
    assert_eq!(bot.send(&w.gw, bad).error.unwrap().path.as_deref(), Some("payload.element"));

    let ra = w.gw.with_hub(|h, _| h.render_for(&"r".into(), a.id()).unwrap());
    let rb = w.gw.with_hub(|h, _| h.render_for(&"r".into(), b.id()).unwrap());
    assert!(!ra.element("img").unwrap().visible);
    assert!(rb.element("img").unwrap().visible);
    assert_eq!(rb.element("img").unwrap().src.as_deref(), Some("http://x/1.png"));

    let mut late = w.login(&w.token(&[], "r", "human"), "L");
    let state = late
        .drain()
        .into_iter()
        .find_map(|d| match d {
            Delivery::Frame(ServerFrame::Control(ControlFrame::RoomState(s))) => Some(s),
            _ => None,
        })
        .unwrap();
    assert_eq!(state.layout.element("img").unwrap().src.as_deref(), Some("http://x/1.png"));
    assert!(state.layout.element("img").unwrap().visible);
}

#[test]
fn video_session_reaches_subscribers_only() {
    let w = World::new();
    w.room("r");
    let mut sub = w.login(&w.token(&["video_subscribe"], "r", "human"), "S");
    let mut other = w.login(&w.token(&[], "r", "human"), "O");
    sub.drain();
    other.drain();
    let (s, b) = w.api("POST", "/rooms/r/video-session", json!({"video_session": "sess-abc"}));
    assert_eq!(s, 200);
    assert_eq!(b["video_session"], "sess-abc");
    assert_eq!(sub.events()[0].payload["video_session"], "sess-abc");
    assert!(other.events().is_empty());
    assert_eq!(w.api("POST", "/rooms/r/video-session", json!({"video_session": "again"})).0, 409);
}

#[test]
fn keystrokes_are_throttled_but_not_history() {
    let clock = Arc::new(ManualClock::new(0));
    let hub = Hub::in_memory(clock.clone(), HubConfig::default()).unwrap();
    let admin = hub.admin_token().0.clone();
    let w = World { gw: Gateway::new(hub), admin };
    w.room("r");
    let mut a = w.login(&w.token(&["live_typing", "send_text"], "r", "human"), "A");
    a.drain();
    for draft in ["h", "he", "hel"] {
        assert!(a.send(&w.gw, ClientFrame::new(EventType::Keystroke, "r", json!({"text": draft}))).ok);
    }
    assert!(a.send(&w.gw, text("r", "hello")).ok);
    let mut ok = 3;
    let mut limited = 0;
    for i in 0..30 {
        let r = a.send(&w.gw, ClientFrame::new(EventType::Keystroke, "r", json!({"text": "x".repeat(i)})));
        if r.ok {
            ok += 1;
        } else {
            assert_eq!(r.error.unwrap().code, "rate_limited");
            limited += 1;
        }
    }
    assert_eq!((ok, limited), (20, 13));
    clock.advance(1001);
    assert!(a.send(&w.gw, ClientFrame::new(EventType::Keystroke, "r", json!({"text": ""}))).ok);

    let mut late = w.login(&w.token(&[], "r", "human"), "L");
    let state = late
        .drain()
        .into_iter()
        .find_map(|d| match d {
            Delivery::Frame(ServerFrame::Control(ControlFrame::RoomState(s))) => Some(s),
            _ => None,
        })
        .unwrap();
    assert_eq!(texts(&state.history), ["hello"]);
    assert_eq!(state.history.len(), 1);
}

#[test]
fn bounding_boxes_are_normalized() {
    let w = World::new();
    let layout = r#"{"title":"T","html":[{"layout-type":"image","id":"drawing-area"}],"scripts":{}}"#;
    let lid = w.gw.api(&ApiRequest::new("POST", "/layouts").bearer(&w.admin).body(layout)).json()["id"].as_u64().unwrap();
    w.api("POST", "/rooms", json!({"id": "r", "layout_id": lid}));
    let mut a = w.login(&w.token(&["annotate"], "r", "human"), "A");
    a.drain();
    let r = a.send(&w.gw, ClientFrame::new(EventType::BoundingBox, "r", json!({"element_id": "drawing-area", "x0": 50, "y0": 40, "x1": 10, "y1": 10})));
    assert!(r.ok);
    let r = a.send(&w.gw, ClientFrame::new(EventType::BoundingBox, "r", json!({"element_id": "nowhere", "x0": 0, "y0": 0, "x1": 1, "y1": 1})));
    assert_eq!(r.error.unwrap().path.as_deref(), Some("payload.element_id"));
    let last = w.gw.with_hub(|h, _| h.log().entries(&"r".into()).unwrap().last().unwrap().clone());
    assert_eq!(last.payload, json!({"element_id": "drawing-area", "x0": 10, "y0": 10, "x1": 50, "y1": 40}));
}

#[test]
fn queue_overflow_kills_only_the_slow_session() {
    let hub = Hub::in_memory(Arc::new(ManualClock::new(0)), HubConfig::default()).unwrap();
    let admin = hub.admin_token().0.clone();
    let w = World { gw: Gateway::with_capacity(hub, 8), admin };
    w.room("r");
    let mut fast = w.login(&w.token(&["send_text"], "r", "human"), "F");
    let slow = w.login(&w.token(&[], "r", "human"), "S");
    for i in 0..20 {
        assert!(fast.send(&w.gw, text("r", &format!("m{i}"))).ok);
    }
    let mut killed = slow.conn.kill;
    assert_eq!(killed.try_recv().unwrap().0, 4004);
    let members = w.gw.with_hub(|h, _| h.room(&"r".into()).unwrap().members.clone());
    assert!(!members.contains(&slow.conn.user));
    assert_eq!(w.gw.connection_count(), 1);
}

#[test]
fn api_errors_and_auth() {
    let w = World::new();
    assert_eq!(w.gw.api(&ApiRequest::new("GET", "/rooms")).status, 401);
    assert_eq!(w.gw.api(&ApiRequest::new("GET", "/rooms").bearer("bogus")).status, 401);
    w.room("waiting");
    assert_eq!(w.api("POST", "/rooms", json!({"id": "waiting"})).0, 409);
    let (s, b) = w.api("POST", "/tasks", json!({"name": "meetup", "num_users": 0}));
    assert_eq!((s, b["error"]["path"].as_str()), (422, Some("num_users")));
    assert_eq!(w.api("POST", "/tokens", json!({"login_room_id": "ghost"})).0, 404);
    let weak = w.token(&["send_text"], "waiting", "human");
    let r = w.gw.api(&ApiRequest::new("POST", "/tokens").bearer(&weak).json(&json!({})));
    assert_eq!(r.status, 403);
    let r = w.gw.api(&ApiRequest::new("POST", "/layouts").bearer(&w.admin).body(r#"{"title":"x","scripts":{"incoming-video":"display-text"}}"#));
    assert_eq!((r.status, r.json()["error"]["path"].as_str().map(str::to_string)), (422, Some("scripts.incoming-video".into())));
    assert_eq!(w.api("GET", "/rooms/waiting/logs?since=99", json!({})).1, json!([]));
    assert_eq!(w.api("GET", "/rooms/ghost/logs", json!({})).0, 404);
    assert_eq!(w.api("GET", "/nowhere", json!({})).0, 404);
}

#[test]
fn auto_room_ids_never_collide() {
    let w = World::new();
    w.room("room-2");
    let mut ids = std::collections::BTreeSet::new();
    for _ in 0..200 {
        let (s, b) = w.api("POST", "/rooms", json!({}));
        assert_eq!(s, 201);
        assert!(ids.insert(b["id"].as_str().unwrap().to_string()));
    }
    assert!(!ids.contains("room-2"));
}

#[test]
fn get_endpoints_do_not_mutate() {
    let w = World::new();
    w.room("r");
    let tok = w.token(&["send_text"], "r", "human");
    let mut a = w.login(&tok, "A");
    a.send(&w.gw, text("r", "x"));
    let before = w.gw.with_hub(|h, _| serde_json::to_string(&h.export_state()).unwrap());
    for path in ["/rooms", "/rooms/r", "/rooms/r/logs", "/rooms/r/logs?format=ndjson", "/export", &format!("/tokens/{tok}"), "/users/1"] {
        assert_eq!(w.api("GET", path, json!({})).0, 200, "{path}");
    }
    let after = w.gw.with_hub(|h, _| serde_json::to_string(&h.export_state()).unwrap());
    assert_eq!(before, after);
}

#[test]
fn bundle_is_all_or_nothing() {
    let w = World::new();
    let good = json!({
        "layouts": {"chat": {"title": "Chat", "scripts": {"incoming-text": "display-text"}}},
        "rooms": [{"id": "waiting", "layout": "chat"}],
        "tasks": [{"name": "dito", "num_users": 2, "layout": "chat"}],
        "tokens": [{"count": 3, "permissions": ["send_text"], "login_room": "waiting", "task": "dito"}]
    });
    let mut bad = good.clone();
    bad["tokens"][0]["task"] = json!("missing");
    let before = w.gw.with_hub(|h, _| h.export_state());
    let (s, b) = w.api("POST", "/bundles", bad);
    assert_eq!((s, b["error"]["path"].as_str()), (422, Some("tokens[0].task")));
    assert_eq!(w.gw.with_hub(|h, _| h.export_state()), before);

    let (s, b) = w.api("POST", "/bundles", good);
    assert_eq!(s, 201, "{b}");
    assert_eq!(b["tokens"].as_array().unwrap().len(), 3);
    assert_eq!(b["tokens"][0]["task_id"], b["tasks"]["dito"]);
    assert_eq!(w.api("GET", "/rooms/waiting", json!({})).0, 200);
}

#[test]
fn claims_are_exclusive_among_live_holders() {
    let w = World::new();
    w.room("w");
    let t1 = w.token(&["room_admin"], "w", "bot");
    let t2 = w.token(&["room_admin"], "w", "bot");
    let b1 = w.login(&t1, "c1");
    let _b2 = w.login(&t2, "c2");
    let claim = |t: &str| w.gw.api(&ApiRequest::new("POST", "/rooms/w/claim").bearer(t).json(&json!({"role": "concierge"})));
    assert_eq!(claim(&t1).status, 200);
    assert_eq!(claim(&t2).status, 409);
    w.gw.disconnect(b1.conn.session);
    assert_eq!(claim(&t2).status, 200);
}

#[test]
fn permission_set_effective_fold() {
    let w = World::new();
    w.room("r");
    let tok = w.token(&[], "r", "human");
    let mut expect = PermissionSet::empty();
    let ops: [(&[Permission], &[Permission]); 4] = [
        (&[Permission::SendText, Permission::Annotate], &[]),
        (&[Permission::SendImage], &[Permission::Annotate]),
        (&[Permission::Annotate], &[Permission::Annotate]),
        (&[], &[Permission::SendText]),
    ];
    for (add, remove) in ops {
        let (_, b) = w.api(
            "PATCH",
            &format!("/tokens/{tok}/permissions"),
            json!({"add": add.iter().map(|p| p.as_str()).collect::<Vec<_>>(), "remove": remove.iter().map(|p| p.as_str()).collect::<Vec<_>>()}),
        );
        expect = expect.union(add.iter().copied().collect()).difference(remove.iter().copied().collect());
        let got: PermissionSet = serde_json::from_value(b["permissions"].clone()).unwrap();
        assert_eq!(got, expect);
    }
}
