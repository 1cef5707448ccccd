//! Bot client library and the reference bots built on it.

pub mod codes;
pub mod concierge;
pub mod dito;
pub mod echo;
pub mod moderator;
pub mod sdk;

pub use sdk::{Bot, BotConfig, Endpoint, SdkError};
