use std::path::Path;
use std::sync::Arc;

use colloquy_core::api::ApiRequest;
use colloquy_core::clock::ManualClock;
use colloquy_core::event::EventType;
use colloquy_core::gateway::Gateway;
use colloquy_core::hub::{Hub, HubConfig};
use colloquy_core::log::{parse_ndjson, NdjsonMirror};
use colloquy_core::store::Store;
use colloquy_core::wire::ClientFrame;
use serde_json::{json, Value};

fn open(dir: &Path, clock: Arc<ManualClock>) -> Gateway {
    let store = Store::open(&dir.join("colloquy.db")).unwrap();
    let mirror = NdjsonMirror::open(dir.join("logs")).unwrap();
    Gateway::new(Hub::open(store, Some(mirror), clock, HubConfig::default()).unwrap())
}

fn admin(gw: &Gateway) -> String {
    gw.with_hub(|h, _| h.admin_token().0.clone())
}

fn call(gw: &Gateway, method: &str, path: &str, body: Value) -> Value {
    let r = gw.api(&ApiRequest::new(method, path).bearer(admin(gw)).json(&body));
    assert!(r.status < 300, "{method} {path}: {:?}", r.json());
    r.json()
}

fn populate(gw: &Gateway) -> (String, String) {
    let layout = r#"{"title":"T","html":[{"layout-type":"image","id":"img"}],"scripts":{"incoming-text":"display-text"}}"#;
    let r = gw.api(&ApiRequest::new("POST", "/layouts").bearer(admin(gw)).body(layout));
    let lid = r.json()["id"].as_u64().unwrap();
    call(gw, "POST", "/rooms", json!({"id": "r", "layout_id": lid}));
    call(gw, "POST", "/tasks", json!({"name": "dito", "num_users": 2, "layout_id": lid}));
    let human = call(gw, "POST", "/tokens", json!({"permissions": ["send_text", "typing_events"], "login_room_id": "r", "uses": 3}));
    let bot = call(gw, "POST", "/tokens", json!({"permissions": ["layout_modify"], "login_room_id": "r", "kind": "bot", "uses": 3}));
    (human["id"].as_str().unwrap().into(), bot["id"].as_str().unwrap().into())
}

#[test]
fn restart_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(10_000));
    let gw = open(dir.path(), clock.clone());
    let admin_before = admin(&gw);
    let (h, b) = populate(&gw);
    let hc = gw.connect(&h, Some("H")).unwrap();
    let bc = gw.connect(&b, Some("B")).unwrap();
    clock.advance(5);
    gw.submit(hc.session, ClientFrame::new(EventType::TextMessage, "r", json!({"text": "hello"})));
    gw.submit(bc.session, ClientFrame::new(EventType::DisplayUpdate, "r", json!({"element": "img", "mutation": "set_image_src", "value": "http://i/1.png"})));
    gw.disconnect(hc.session);
    gw.disconnect(bc.session);
    let before = gw.with_hub(|h, _| h.export_state());
    drop(gw);

    let gw = open(dir.path(), clock.clone());
    assert_eq!(admin(&gw), admin_before);
    let after = gw.with_hub(|h, _| h.export_state());
    assert_eq!(serde_json::to_string(&after).unwrap(), serde_json::to_string(&before).unwrap());

    // The mirror holds the same entries as the store.
    let text = std::fs::read_to_string(dir.path().join("logs/r.ndjson")).unwrap();
    assert_eq!(parse_ndjson(&text).unwrap(), before.logs[&"r".into()]);

    // Display state is folded back from the log.
    let hc = gw.connect(&h, Some("H")).unwrap();
    let src = gw.with_hub(|hub, _| hub.render_for(&"r".into(), hc.user).unwrap().element("img").unwrap().src.clone());
    assert_eq!(src.as_deref(), Some("http://i/1.png"));
}

#[test]
fn crash_closes_dangling_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let gw = open(dir.path(), clock.clone());
    let (h, _) = populate(&gw);
    let hc = gw.connect(&h, Some("H")).unwrap();
    gw.submit(hc.session, ClientFrame::new(EventType::TypingStarted, "r", json!({})));
    let uid = hc.user;
    // No disconnect: simulate the process dying.
    drop(gw);

    let gw = open(dir.path(), clock);
    let (members, tail) = gw.with_hub(|hub, _| {
        let entries = hub.log().entries(&"r".into()).unwrap();
        let tail: Vec<(EventType, Value)> = entries.iter().rev().take(2).rev().map(|e| (e.event_type, e.payload.clone())).collect();
        (hub.room(&"r".into()).unwrap().members.clone(), tail)
    });
    assert!(members.is_empty());
    assert_eq!(tail[0].0, EventType::TypingStopped);
    assert_eq!(tail[1], (EventType::Left, json!({"user": uid.0, "reason": "disconnected"})));
    let mirrored = std::fs::read_to_string(dir.path().join("logs/r.ndjson")).unwrap();
    assert!(mirrored.lines().last().unwrap().contains("\"left\""));

    let again = gw.connect(&h, None).unwrap();
    assert_eq!(again.user, uid);
    assert!(gw.with_hub(|hub, _| hub.room(&"r".into()).unwrap().members.contains(&uid)));
}

#[test]
fn audit_trail_records_request_ids() {
    let dir = tempfile::tempdir().unwrap();
    let gw = open(dir.path(), Arc::new(ManualClock::new(0)));
    let mut req = ApiRequest::new("POST", "/tokens").bearer(admin(&gw)).json(&json!({}));
    req.request_id = Some("req-42".into());
    assert_eq!(gw.api(&req).status, 201);
    let mut req = ApiRequest::new("POST", "/rooms").bearer(admin(&gw)).json(&json!({"id": "x"}));
    req.request_id = Some("req-43".into());
    gw.api(&req);
    gw.with_hub(|hub, _| {
        let audit = hub.audit_log();
        assert_eq!(audit.last().unwrap().request_id.as_deref(), Some("req-42"));
        let created = &hub.log().entries(&"x".into()).unwrap()[0];
        assert_eq!(created.request_id.as_deref(), Some("req-43"));
    });
    drop(gw);
    let gw = open(dir.path(), Arc::new(ManualClock::new(0)));
    assert_eq!(gw.with_hub(|hub, _| hub.audit_log().len()), 1);
}
