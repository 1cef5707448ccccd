//! Live state against state rebuilt from the exported log.

use std::sync::Arc;

use colloquy_core::api::ApiRequest;
use colloquy_core::clock::ManualClock;
use colloquy_core::event::EventType;
use colloquy_core::gateway::{Connection, Gateway};
use colloquy_core::hub::{Hub, HubConfig};
use colloquy_core::log::parse_ndjson;
use colloquy_core::replay::ReplayState;
use colloquy_core::wire::ClientFrame;
use proptest::prelude::*;
use serde_json::json;

#[derive(Debug, Clone)]
enum Op {
    Login(usize),
    Logout(usize),
    Text(usize, usize, Option<usize>),
    Typing(usize, usize, bool),
    Display(usize, usize, Option<usize>, u8),
    Patch(usize, bool),
    Move(usize, usize, usize),
    Relay(usize, bool),
    Close(usize),
    Tick(u16),
}

const ROOMS: [&str; 3] = ["r0", "r1", "r2"];
const USERS: usize = 6;

fn op() -> impl Strategy<Value = Op> {
    let u = 0..USERS;
    let r = 0..ROOMS.len();
    prop_oneof![
        3 => u.clone().prop_map(Op::Login),
        1 => u.clone().prop_map(Op::Logout),
        4 => (u.clone(), r.clone(), proptest::option::of(0..USERS)).prop_map(|(a, b, c)| Op::Text(a, b, c)),
        2 => (u.clone(), r.clone(), any::<bool>()).prop_map(|(a, b, c)| Op::Typing(a, b, c)),
        2 => (u.clone(), r.clone(), proptest::option::of(0..USERS), 0u8..4).prop_map(|(a, b, c, d)| Op::Display(a, b, c, d)),
        1 => (u.clone(), any::<bool>()).prop_map(|(a, b)| Op::Patch(a, b)),
        2 => (u.clone(), r.clone(), r.clone()).prop_map(|(a, b, c)| Op::Move(a, b, c)),
        1 => (u.clone(), any::<bool>()).prop_map(|(a, b)| Op::Relay(a, b)),
        1 => r.prop_map(Op::Close),
        1 => (0u16..500).prop_map(Op::Tick),
    ]
}

fn run(ops: &[Op]) -> Result<(), TestCaseError> {
    let clock = Arc::new(ManualClock::new(1_000_000));
    let hub = Hub::in_memory(clock.clone(), HubConfig::default()).unwrap();
    let admin = hub.admin_token().0.clone();
    let gw = Gateway::with_capacity(hub, 1 << 16);
    let api = |m: &str, p: &str, b: serde_json::Value, t: &str| gw.api(&ApiRequest::new(m, p).bearer(t).json(&b));
    let layout = r#"{"title":"T","html":[{"layout-type":"image","id":"img"},{"layout-type":"div","id":"txt"}],"scripts":{}}"#;
    let lid = gw.api(&ApiRequest::new("POST", "/layouts").bearer(&admin).body(layout)).json()["id"].as_u64().unwrap();
    for r in ROOMS {
        api("POST", "/rooms", json!({"id": r, "layout_id": lid}), &admin);
    }
    // Even users are humans, odd users bots.
    let tokens: Vec<String> = (0..USERS)
        .map(|i| {
            let kind = if i % 2 == 0 { "human" } else { "bot" };
            let perms = if i % 2 == 0 {
                json!(["send_text", "send_private", "typing_events"])
            } else {
                json!(["send_text", "send_private", "typing_events", "layout_modify", "room_admin", "send_impersonated"])
            };
            let b = json!({"permissions": perms, "login_room_id": ROOMS[i % 3], "kind": kind, "uses": 1000});
            api("POST", "/tokens", b, &admin).json()["id"].as_str().unwrap().to_string()
        })
        .collect();
    let mut conns: Vec<Option<Connection>> = (0..USERS).map(|_| None).collect();
    let mut uid = vec![None; USERS];

    for op in ops {
        match *op {
            Op::Login(i) => {
                let c = gw.connect(&tokens[i], Some(&format!("u{i}"))).unwrap();
                uid[i] = Some(c.user);
                conns[i] = Some(c);
            }
            Op::Logout(i) => {
                if let Some(c) = conns[i].take() {
                    gw.disconnect(c.session);
                }
            }
            Op::Text(i, r, to) => {
                if let Some(c) = &conns[i] {
                    let mut f = ClientFrame::new(EventType::TextMessage, ROOMS[r], json!({"text": "m"}));
                    f.to = to.and_then(|t| uid[t]);
                    gw.submit(c.session, f);
                }
            }
            Op::Typing(i, r, on) => {
                if let Some(c) = &conns[i] {
                    let t = if on { EventType::TypingStarted } else { EventType::TypingStopped };
                    gw.submit(c.session, ClientFrame::new(t, ROOMS[r], json!({})));
                }
            }
            Op::Display(i, r, scope, v) => {
                if let Some(c) = &conns[i] {
                    let scope = scope.and_then(|s| uid[s]).map_or(json!("room"), |u| json!(u));
                    let payload = match v {
                        0 => json!({"element": "img", "mutation": "set_image_src", "value": format!("http://i/{v}"), "scope": scope}),
                        1 => json!({"element": "img", "mutation": "set_visible", "value": false, "scope": scope}),
                        2 => json!({"element": "txt", "mutation": "set_text", "value": "t", "scope": scope}),
                        _ => json!({"element": "txt", "mutation": "set_class", "value": "c", "scope": scope}),
                    };
                    gw.submit(c.session, ClientFrame::new(EventType::DisplayUpdate, ROOMS[r], payload));
                }
            }
            Op::Patch(i, add) => {
                let key = if add { "add" } else { "remove" };
                api("PATCH", &format!("/tokens/{}/permissions", tokens[i]), json!({ key: ["send_text"] }), &admin);
            }
            Op::Move(i, from, to) => {
                if let Some(u) = uid[i] {
                    api("POST", &format!("/users/{u}/move"), json!({"from": ROOMS[from], "to": ROOMS[to]}), &admin);
                }
            }
            Op::Relay(i, on) => {
                api("POST", &format!("/rooms/{}/relay", ROOMS[i % 3]), json!({"enabled": on}), &tokens[i]);
            }
            Op::Close(r) => {
                api("POST", &format!("/rooms/{}/close", ROOMS[r]), json!({}), &admin);
            }
            Op::Tick(ms) => clock.advance(ms as i64),
        }
    }

    gw.with_hub(|hub, _| {
        let mut entries = Vec::new();
        for r in ROOMS {
            let text = hub.log().export(&r.into()).unwrap();
            let parsed = parse_ndjson(&text).unwrap();
            for (i, e) in parsed.iter().enumerate() {
                assert_eq!(e.seq, i as u64 + 1);
            }
            assert!(parsed.windows(2).all(|w| w[0].time <= w[1].time));
            entries.extend(parsed);
        }
        let replay = ReplayState::from_entries(&entries).unwrap();
        assert_eq!(hub.replay_summaries(&replay), hub.live_summaries());
        for r in ROOMS {
            let folded = &replay.rooms[&r.into()].typing;
            assert_eq!(*folded, hub.typing(&r.into()));
        }
    });
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn replay_reproduces_live_state(ops in proptest::collection::vec(op(), 1..80)) {
        run(&ops)?;
    }
}

#[test]
fn disconnect_folds_typing_to_stopped() {
    run(&[Op::Login(0), Op::Typing(0, 0, true), Op::Logout(0)]).unwrap();
}
