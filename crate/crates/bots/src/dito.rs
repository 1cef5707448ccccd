//! Two players, two slightly different images, find the difference.
//!
//! One game per task room. The bot waits for two humans, shows each their
//! image, collects `/ready` from both, then accepts `/difference <text>` from
//! either player, issues both completion codes and closes the room.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use colloquy_core::event::{CommandPayload, EventType, JoinedPayload, LeftPayload, Scope};
use colloquy_core::layout::Mutation;
use colloquy_core::model::{RoomId, UserId, UserKind};
use colloquy_core::wire::EventFrame;
use parking_lot::Mutex;
use serde::Deserialize;

use crate::codes;
use crate::sdk::Bot;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ImagePair {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone)]
pub struct DitoConfig {
    pub pairs: Vec<ImagePair>,
    /// Element that shows each player's image.
    pub image_element: String,
    pub instructions: String,
    pub code_secret: Vec<u8>,
}

impl DitoConfig {
    pub fn new(pairs: Vec<ImagePair>) -> Self {
        DitoConfig {
            pairs,
            image_element: "image".into(),
            instructions: "You and your partner see almost the same picture. Talk to each other to find what differs. \
                           Type /ready when you are ready to start, and /difference <description> once you have found it."
                .into(),
            code_secret: b"colloquy".to_vec(),
        }
    }

    /// Reads a JSON array of `{"a": url, "b": url}` objects.
    pub fn load_pairs(path: &Path) -> anyhow::Result<Vec<ImagePair>> {
        let text = std::fs::read_to_string(path)?;
        let pairs: Vec<ImagePair> = serde_json::from_str(&text)?;
        anyhow::ensure!(!pairs.is_empty(), "{}: no image pairs", path.display());
        Ok(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Instructions,
    AwaitingReady,
    Discussing,
    Done,
}

#[derive(Debug, Clone)]
pub struct Game {
    pub room: RoomId,
    pub players: Vec<UserId>,
    pub pair: ImagePair,
    pub ready: BTreeSet<UserId>,
    pub phase: Phase,
    pub solution: Option<String>,
    pub codes: Vec<(UserId, String)>,
}

impl Game {
    fn advance(&mut self, to: Phase) {
        assert!(to >= self.phase, "phase never goes back");
        self.phase = to;
    }
}

#[derive(Default)]
struct State {
    games: HashMap<RoomId, Game>,
    next_pair: usize,
    home: Option<RoomId>,
}

#[derive(Clone)]
pub struct Dito {
    bot: Bot,
    config: Arc<DitoConfig>,
    state: Arc<Mutex<State>>,
}

impl Dito {
    /// Installs the handlers; call before [`Bot::start`]. The room of the
    /// bot's first own `joined` is its home and never hosts a game.
    pub fn install(bot: &Bot, config: DitoConfig) -> Dito {
        assert!(!config.pairs.is_empty(), "DiTo needs at least one image pair");
        let d = Dito { bot: bot.clone(), config: Arc::new(config), state: Arc::default() };
        let me = d.clone();
        bot.on(EventType::Joined, move |_, ev| {
            let me = me.clone();
            async move { me.on_joined(ev).await }
        });
        let me = d.clone();
        bot.on(EventType::Command, move |_, ev| {
            let me = me.clone();
            async move { me.on_command(ev).await }
        });
        let me = d.clone();
        bot.on(EventType::Left, move |_, ev| {
            let me = me.clone();
            async move {
                if let Ok(p) = serde_json::from_value::<LeftPayload>(ev.payload) {
                    if let Some(g) = me.state.lock().games.get_mut(&ev.room) {
                        if g.phase == Phase::Instructions {
                            g.players.retain(|u| *u != p.user);
                        }
                    }
                }
                Ok(())
            }
        });
        d
    }

    pub fn game(&self, room: &RoomId) -> Option<Game> {
        self.state.lock().games.get(room).cloned()
    }

    pub fn games(&self) -> Vec<Game> {
        self.state.lock().games.values().cloned().collect()
    }

    async fn on_joined(&self, ev: EventFrame) -> anyhow::Result<()> {
        let p: JoinedPayload = serde_json::from_value(ev.payload)?;
        let room = ev.room;
        let start = {
            let mut st = self.state.lock();
            if p.user == self.bot.id() && st.home.is_none() {
                st.home = Some(room);
                return Ok(());
            }
            if st.home.as_ref() == Some(&room) {
                return Ok(());
            }
            if p.user == self.bot.id() {
                // Humans may already be here if we were moved in late.
                let humans: Vec<UserId> =
                    self.bot.members(&room).into_iter().filter(|m| m.kind == UserKind::Human).map(|m| m.id).collect();
                let pair = self.config.pairs[st.next_pair % self.config.pairs.len()].clone();
                st.next_pair += 1;
                st.games.insert(
                    room.clone(),
                    Game { room: room.clone(), players: humans, pair, ready: BTreeSet::new(), phase: Phase::Instructions, solution: None, codes: vec![] },
                );
            } else if p.kind == UserKind::Human {
                if let Some(g) = st.games.get_mut(&room) {
                    if g.phase == Phase::Instructions && !g.players.contains(&p.user) {
                        g.players.push(p.user);
                    }
                }
            }
            match st.games.get_mut(&room) {
                Some(g) if g.phase == Phase::Instructions && g.players.len() == 2 => {
                    g.advance(Phase::AwaitingReady);
                    Some(g.clone())
                }
                _ => None,
            }
        };
        if let Some(g) = start {
            let el = &self.config.image_element;
            self.bot.display(&room, el, Mutation::SetImageSrc(g.pair.a.clone()), Scope::User(g.players[0])).await?;
            self.bot.display(&room, el, Mutation::SetImageSrc(g.pair.b.clone()), Scope::User(g.players[1])).await?;
            self.bot.say(&room, &self.config.instructions).await?;
        }
        Ok(())
    }

    async fn on_command(&self, ev: EventFrame) -> anyhow::Result<()> {
        let Some(user) = ev.actor else { return Ok(()) };
        let cmd: CommandPayload = serde_json::from_value(ev.payload)?;
        let room = ev.room;
        enum Reply {
            Private(&'static str),
            Open,
            Finish(Vec<(UserId, String)>),
        }
        let reply = {
            let mut st = self.state.lock();
            let Some(g) = st.games.get_mut(&room) else { return Ok(()) };
            if !g.players.contains(&user) {
                return Ok(());
            }
            match (cmd.command.as_str(), g.phase) {
                ("ready", Phase::AwaitingReady) => {
                    g.ready.insert(user);
                    if g.ready.len() == g.players.len() {
                        g.advance(Phase::Discussing);
                        Reply::Open
                    } else {
                        Reply::Private("Noted. Waiting for your partner to be ready.")
                    }
                }
                ("ready", Phase::Instructions) => Reply::Private("Please wait until your partner has arrived."),
                ("ready", _) => Reply::Private("You are already set."),
                ("difference", Phase::Discussing) => {
                    if cmd.args.is_empty() {
                        Reply::Private("Please describe the difference, e.g. /difference the left cube is red.")
                    } else {
                        g.solution = Some(cmd.args.join(" "));
                        g.advance(Phase::Done);
                        g.codes = g.players.iter().map(|u| (*u, codes::code(&self.config.code_secret, &room, *u))).collect();
                        Reply::Finish(g.codes.clone())
                    }
                }
                ("difference", Phase::Done) => return Ok(()),
                ("difference", _) => Reply::Private("Both of you need to type /ready before you can submit a difference."),
                _ => return Ok(()),
            }
        };
        match reply {
            Reply::Private(text) => {
                self.bot.whisper(&room, user, text).await?;
            }
            Reply::Open => {
                self.bot.say(&room, "You are both ready. Describe your images to each other and find the difference.").await?;
            }
            Reply::Finish(codes) => {
                self.bot.say(&room, "Thank you, the task is complete.").await?;
                for (u, code) in codes {
                    self.bot.issue_code(&room, u, &code, Some("completed")).await?;
                    self.bot.whisper(&room, u, &format!("Your completion code is {code}")).await?;
                }
                self.bot.api("POST", &format!("/rooms/{room}/close"), None).await?;
            }
        }
        Ok(())
    }
}
