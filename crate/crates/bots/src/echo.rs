//! Repeats every human message back, keeping its visibility.

use colloquy_core::event::{EventType, TextPayload};
use colloquy_core::model::UserKind;

use crate::sdk::Bot;

pub fn install(bot: &Bot) {
    bot.on(EventType::TextMessage, |bot, ev| async move {
        let Some(author) = ev.actor.filter(|a| *a != bot.id()) else { return Ok(()) };
        if bot.member(&ev.room, author).is_some_and(|m| m.kind != UserKind::Human) {
            return Ok(());
        }
        let text = serde_json::from_value::<TextPayload>(ev.payload)?.text;
        match ev.to {
            Some(to) if to == bot.id() => bot.whisper(&ev.room, author, &text).await?,
            Some(_) => return Ok(()),
            None => bot.say(&ev.room, &text).await?,
        };
        Ok(())
    });
}
