//! Turn-taking and message interception.
//!
//! With turns on, exactly one human per room holds `send_text`; each accepted
//! message passes it to the next human in join order. With a relay pipeline,
//! the bot takes over the room's relay slot: human messages reach only the
//! bot, which forwards what the filters let through under the author's name.

use std::collections::HashMap;
use std::sync::Arc;

use colloquy_core::event::{EventType, JoinedPayload, LeftPayload, TextPayload};
use colloquy_core::model::{RoomId, UserId, UserKind};
use colloquy_core::wire::EventFrame;
use parking_lot::Mutex;
use serde_json::json;

use crate::sdk::Bot;

/// One piece of relay output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Relayed {
    /// Shown under the original author's name.
    Forward(String),
    /// Authored by the bot.
    Insert(String),
}

pub trait RelayFilter: Send + Sync {
    /// `index` counts originals relayed in this room so far, from 0.
    fn apply(&self, index: u64, items: Vec<Relayed>) -> Vec<Relayed>;
}

/// Drops whole messages containing a substring.
pub struct DropMessages(pub String);

impl RelayFilter for DropMessages {
    fn apply(&self, _: u64, items: Vec<Relayed>) -> Vec<Relayed> {
        items.into_iter().filter(|r| !matches!(r, Relayed::Forward(t) if t.contains(&self.0))).collect()
    }
}

/// Removes whitespace-separated tokens containing a substring. A message
/// left with no tokens is dropped.
pub struct DropTokens(pub String);

impl RelayFilter for DropTokens {
    fn apply(&self, _: u64, items: Vec<Relayed>) -> Vec<Relayed> {
        items
            .into_iter()
            .filter_map(|r| match r {
                Relayed::Forward(t) => {
                    let kept: Vec<&str> = t.split_whitespace().filter(|w| !w.contains(&self.0)).collect();
                    (!kept.is_empty()).then(|| Relayed::Forward(kept.join(" ")))
                }
                other => Some(other),
            })
            .collect()
    }
}

/// Appends a bot message after every `every`-th original.
pub struct InsertEvery {
    pub every: u64,
    pub text: String,
}

impl RelayFilter for InsertEvery {
    fn apply(&self, index: u64, mut items: Vec<Relayed>) -> Vec<Relayed> {
        if self.every > 0 && (index + 1) % self.every == 0 {
            items.push(Relayed::Insert(self.text.clone()));
        }
        items
    }
}

pub fn run_filters(filters: &[Box<dyn RelayFilter>], index: u64, text: &str) -> Vec<Relayed> {
    filters.iter().fold(vec![Relayed::Forward(text.to_string())], |items, f| f.apply(index, items))
}

#[derive(Default)]
pub struct ModeratorConfig {
    pub turns: bool,
    /// `Some` puts every room the bot joins into relay mode.
    pub relay: Option<Vec<Box<dyn RelayFilter>>>,
    pub reminder: String,
}

impl ModeratorConfig {
    pub fn turns() -> Self {
        ModeratorConfig { turns: true, relay: None, reminder: default_reminder() }
    }

    pub fn relay(filters: Vec<Box<dyn RelayFilter>>) -> Self {
        ModeratorConfig { turns: false, relay: Some(filters), reminder: default_reminder() }
    }
}

fn default_reminder() -> String {
    "Please wait for your turn.".into()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Turns {
    pub order: Vec<UserId>,
    pub current: usize,
}

impl Turns {
    pub fn holder(&self) -> Option<UserId> {
        self.order.get(self.current).copied()
    }
}

#[derive(Default)]
struct RoomState {
    turns: Turns,
    relayed: u64,
}

#[derive(Clone)]
pub struct Moderator {
    bot: Bot,
    config: Arc<ModeratorConfig>,
    rooms: Arc<Mutex<HashMap<RoomId, RoomState>>>,
}

impl Moderator {
    pub fn install(bot: &Bot, config: ModeratorConfig) -> Moderator {
        let m = Moderator { bot: bot.clone(), config: Arc::new(config), rooms: Arc::default() };
        let me = m.clone();
        bot.on(EventType::Joined, move |_, ev| {
            let me = me.clone();
            async move { me.on_joined(ev).await }
        });
        let me = m.clone();
        bot.on(EventType::Left, move |_, ev| {
            let me = me.clone();
            async move { me.on_left(ev).await }
        });
        let me = m.clone();
        bot.on(EventType::TextMessage, move |_, ev| {
            let me = me.clone();
            async move { me.on_text(ev).await }
        });
        let me = m.clone();
        bot.on(EventType::TypingStarted, move |_, ev| {
            let me = me.clone();
            async move { me.on_typing(ev).await }
        });
        m
    }

    pub fn turns(&self, room: &RoomId) -> Option<Turns> {
        self.rooms.lock().get(room).map(|r| r.turns.clone())
    }

    async fn set_send_text(&self, user: UserId, allowed: bool) -> anyhow::Result<()> {
        let key = if allowed { "add" } else { "remove" };
        self.bot.api("PATCH", &format!("/users/{user}/permissions"), Some(&json!({ key: ["send_text"] }))).await?;
        Ok(())
    }

    async fn on_joined(&self, ev: EventFrame) -> anyhow::Result<()> {
        let p: JoinedPayload = serde_json::from_value(ev.payload)?;
        let room = ev.room;
        if p.user == self.bot.id() {
            if self.config.relay.is_some() {
                self.bot.api("POST", &format!("/rooms/{room}/relay"), Some(&json!({"enabled": true}))).await?;
            }
            let mut humans: Vec<UserId> =
                self.bot.members(&room).into_iter().filter(|m| m.kind == UserKind::Human).map(|m| m.id).collect();
            humans.sort();
            self.rooms.lock().insert(room.clone(), RoomState { turns: Turns { order: humans.clone(), current: 0 }, relayed: 0 });
            if self.config.turns {
                for u in humans.iter().skip(1) {
                    self.set_send_text(*u, false).await?;
                }
            }
            return Ok(());
        }
        if p.kind != UserKind::Human {
            return Ok(());
        }
        let silence = {
            let mut rooms = self.rooms.lock();
            let Some(r) = rooms.get_mut(&room) else { return Ok(()) };
            if !r.turns.order.contains(&p.user) {
                r.turns.order.push(p.user);
            }
            r.turns.holder() != Some(p.user)
        };
        if self.config.turns && silence {
            self.set_send_text(p.user, false).await?;
        }
        Ok(())
    }

    async fn on_left(&self, ev: EventFrame) -> anyhow::Result<()> {
        let p: LeftPayload = serde_json::from_value(ev.payload)?;
        let promote = {
            let mut rooms = self.rooms.lock();
            if p.user == self.bot.id() {
                rooms.remove(&ev.room);
                return Ok(());
            }
            let Some(r) = rooms.get_mut(&ev.room) else { return Ok(()) };
            let Some(pos) = r.turns.order.iter().position(|u| *u == p.user) else { return Ok(()) };
            let was_holder = pos == r.turns.current;
            r.turns.order.remove(pos);
            if pos < r.turns.current {
                r.turns.current -= 1;
            }
            if r.turns.current >= r.turns.order.len() {
                r.turns.current = 0;
            }
            if was_holder {
                r.turns.holder()
            } else {
                None
            }
        };
        if let (true, Some(next)) = (self.config.turns, promote) {
            self.set_send_text(next, true).await?;
        }
        Ok(())
    }

    async fn on_text(&self, ev: EventFrame) -> anyhow::Result<()> {
        let Some(author) = ev.actor.filter(|a| *a != self.bot.id()) else { return Ok(()) };
        if ev.displayed_actor.is_some() {
            return Ok(());
        }
        let (pass, relay_index) = {
            let mut rooms = self.rooms.lock();
            let Some(r) = rooms.get_mut(&ev.room) else { return Ok(()) };
            if !r.turns.order.contains(&author) {
                return Ok(());
            }
            let mut pass = None;
            if self.config.turns && r.turns.holder() == Some(author) && r.turns.order.len() > 1 {
                r.turns.current = (r.turns.current + 1) % r.turns.order.len();
                pass = r.turns.holder();
            }
            let idx = r.relayed;
            if self.config.relay.is_some() {
                r.relayed += 1;
            }
            (pass, idx)
        };
        if let Some(filters) = &self.config.relay {
            let text = serde_json::from_value::<TextPayload>(ev.payload.clone())?.text;
            for item in run_filters(filters, relay_index, &text) {
                match (item, ev.to) {
                    (Relayed::Forward(t), to) => self.bot.say_as(&ev.room, author, to, &t).await?,
                    (Relayed::Insert(t), Some(to)) => self.bot.whisper(&ev.room, to, &t).await?,
                    (Relayed::Insert(t), None) => self.bot.say(&ev.room, &t).await?,
                };
            }
        }
        if let Some(next) = pass {
            // Take first, then give, so two players never both hold the flag.
            self.set_send_text(author, false).await?;
            self.set_send_text(next, true).await?;
        }
        Ok(())
    }

    async fn on_typing(&self, ev: EventFrame) -> anyhow::Result<()> {
        if !self.config.turns {
            return Ok(());
        }
        let Some(user) = ev.actor else { return Ok(()) };
        let out_of_turn = self.rooms.lock().get(&ev.room).is_some_and(|r| r.turns.order.contains(&user) && r.turns.holder() != Some(user));
        if out_of_turn {
            self.bot.whisper(&ev.room, user, &self.config.reminder).await?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_compose() {
        let filters: Vec<Box<dyn RelayFilter>> =
            vec![Box::new(DropMessages("forbidden".into())), Box::new(DropTokens("secret".into())), Box::new(InsertEvery { every: 2, text: "...".into() })];
        assert_eq!(run_filters(&filters, 0, "the secret word is mysecret42 ok"), vec![Relayed::Forward("the word is ok".into())]);
        assert_eq!(run_filters(&filters, 1, "secret"), vec![Relayed::Insert("...".into())]);
        assert_eq!(run_filters(&filters, 2, "a forbidden thing"), vec![]);
        assert_eq!(run_filters(&filters, 3, "hi"), vec![Relayed::Forward("hi".into()), Relayed::Insert("...".into())]);
    }
}
