//! Core of a real-time dialog-experiment server: data model, layouts, the
//! event log, delivery rules and the hub state machine. Transports live in
//! the server crate.

pub mod api;
pub mod clock;
pub mod delivery;
pub mod error;
pub mod event;
pub mod gateway;
pub mod hub;
pub mod layout;
pub mod log;
pub mod model;
pub mod replay;
pub mod store;
pub mod wire;

pub use error::{Error, Result};
