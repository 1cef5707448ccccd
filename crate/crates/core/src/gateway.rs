//! Connection table in front of the hub.
//!
//! Each session owns a bounded queue. Frames are pushed with `try_send`; a
//! session whose queue is full is killed with close code 4004 and treated as
//! disconnected, so one slow reader never stalls the others.

use std::collections::HashMap;

use parking_lot::Mutex;
use tokio::sync::{mpsc, oneshot};

use crate::api::{self, ApiRequest, ApiResponse};
use crate::hub::{AuthError, Hub, Outgoing, SessionId};
use crate::model::UserId;
use crate::wire::{ClientFrame, ServerFrame, CLOSE_QUEUE_OVERFLOW};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Frame(ServerFrame),
    /// Close after everything queued before it has been written.
    Close(u16, String),
}

/// The receiving half handed to a transport.
#[derive(Debug)]
pub struct Connection {
    pub session: SessionId,
    pub user: UserId,
    pub rx: mpsc::Receiver<Delivery>,
    /// Fires when the session must close immediately, skipping the queue.
    pub kill: oneshot::Receiver<(u16, String)>,
}

struct Conn {
    tx: mpsc::Sender<Delivery>,
    kill: Option<oneshot::Sender<(u16, String)>>,
}

struct Inner {
    hub: Hub,
    conns: HashMap<SessionId, Conn>,
}

pub struct Gateway {
    inner: Mutex<Inner>,
    capacity: usize,
}

impl Gateway {
    pub fn new(hub: Hub) -> Self {
        Self::with_capacity(hub, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(hub: Hub, capacity: usize) -> Self {
        Gateway { inner: Mutex::new(Inner { hub, conns: HashMap::new() }), capacity: capacity.max(1) }
    }

    pub fn connect(&self, token: &str, name: Option<&str>) -> Result<Connection, AuthError> {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        let (session, user) = inner.hub.authenticate(token, name, &mut out)?;
        let (tx, rx) = mpsc::channel(self.capacity);
        let (kill_tx, kill) = oneshot::channel();
        inner.conns.insert(session, Conn { tx, kill: Some(kill_tx) });
        dispatch(&mut inner, out);
        Ok(Connection { session, user, rx, kill })
    }

    pub fn submit(&self, session: SessionId, frame: ClientFrame) {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        inner.hub.submit(session, frame, &mut out);
        dispatch(&mut inner, out);
    }

    pub fn submit_text(&self, session: SessionId, text: &str) {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        inner.hub.submit_text(session, text, &mut out);
        dispatch(&mut inner, out);
    }

    /// The transport for `session` is gone.
    pub fn disconnect(&self, session: SessionId) {
        let mut inner = self.inner.lock();
        inner.conns.remove(&session);
        let mut out = Vec::new();
        inner.hub.disconnect(session, &mut out);
        dispatch(&mut inner, out);
    }

    pub fn api(&self, req: &ApiRequest) -> ApiResponse {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        let resp = api::handle(&mut inner.hub, req, &mut out);
        dispatch(&mut inner, out);
        resp
    }

    /// Runs `f` against the hub; any outgoing effects are delivered.
    pub fn with_hub<R>(&self, f: impl FnOnce(&mut Hub, &mut Vec<Outgoing>) -> R) -> R {
        let mut inner = self.inner.lock();
        let mut out = Vec::new();
        let r = f(&mut inner.hub, &mut out);
        dispatch(&mut inner, out);
        r
    }

    pub fn connection_count(&self) -> usize {
        self.inner.lock().conns.len()
    }
}

fn dispatch(inner: &mut Inner, out: Vec<Outgoing>) {
    let mut pending = std::collections::VecDeque::from(out);
    while let Some(item) = pending.pop_front() {
        let (session, delivery) = match item {
            Outgoing::Frame { session, frame } => (session, Delivery::Frame(frame)),
            Outgoing::Close { session, code, reason } => (session, Delivery::Close(code, reason)),
        };
        let closing = matches!(delivery, Delivery::Close(..));
        let Some(conn) = inner.conns.get_mut(&session) else { continue };
        match conn.tx.try_send(delivery) {
            Ok(()) => {
                if closing {
                    inner.conns.remove(&session);
                }
            }
            Err(mpsc::error::TrySendError::Full(_)) => {
                tracing::warn!("session {session}: queue full, closing");
                let mut conn = inner.conns.remove(&session).expect("present");
                if let Some(kill) = conn.kill.take() {
                    let _ = kill.send((CLOSE_QUEUE_OVERFLOW, "delivery queue overflow".into()));
                }
                let mut more = Vec::new();
                inner.hub.disconnect(session, &mut more);
                pending.extend(more);
            }
            Err(mpsc::error::TrySendError::Closed(_)) => {
                inner.conns.remove(&session);
                let mut more = Vec::new();
                inner.hub.disconnect(session, &mut more);
                pending.extend(more);
            }
        }
    }
}
