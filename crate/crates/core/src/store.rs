//! Single-file SQLite persistence. Rows hold JSON documents; the in-memory
//! hub stays authoritative and writes through on every change.

use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{LogEntry, Timestamp};
use crate::model::{LayoutId, Room, Task, Token, User};

/// Record of a mutating API call that is not tied to one room.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub time: Timestamp,
    pub request_id: Option<String>,
    pub action: String,
    pub subject: String,
}

#[derive(Debug, Default)]
pub struct Snapshot {
    pub tokens: Vec<Token>,
    pub layouts: Vec<(LayoutId, String)>,
    pub tasks: Vec<Task>,
    pub rooms: Vec<Room>,
    pub users: Vec<User>,
    /// Ordered by room, then seq.
    pub events: Vec<LogEntry>,
    pub audit: Vec<AuditEntry>,
}

pub struct Store {
    conn: Connection,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta    (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS tokens  (id TEXT PRIMARY KEY, doc TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS layouts (id INTEGER PRIMARY KEY, source TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS tasks   (id INTEGER PRIMARY KEY, doc TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS rooms   (id TEXT PRIMARY KEY, ord INTEGER NOT NULL, doc TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS users   (id INTEGER PRIMARY KEY, doc TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS events  (room TEXT NOT NULL, seq INTEGER NOT NULL, doc TEXT NOT NULL, PRIMARY KEY (room, seq));
CREATE TABLE IF NOT EXISTS audit   (id INTEGER PRIMARY KEY AUTOINCREMENT, doc TEXT NOT NULL);
";

fn to_doc<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("stored documents serialize")
}

fn from_doc<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Storage(format!("corrupt row: {e}")))
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        // WAL with NORMAL sync survives process kills, which is the durability we promise.
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn })
    }

    pub fn get_meta(&self, key: &str) -> Result<Option<String>> {
        Ok(self.conn.query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0)).optional()?)
    }

    pub fn set_meta(&self, key: &str, value: &str) -> Result<()> {
        self.conn.execute("INSERT OR REPLACE INTO meta (key, value) VALUES (?1, ?2)", [key, value])?;
        Ok(())
    }

    pub fn put_token(&self, token: &Token) -> Result<()> {
        self.conn.execute("INSERT OR REPLACE INTO tokens (id, doc) VALUES (?1, ?2)", params![token.id.0, to_doc(token)])?;
        Ok(())
    }

    pub fn put_layout(&self, id: LayoutId, source: &str) -> Result<()> {
        self.conn.execute("INSERT INTO layouts (id, source) VALUES (?1, ?2)", params![id.0 as i64, source])?;
        Ok(())
    }

    pub fn put_task(&self, task: &Task) -> Result<()> {
        self.conn.execute("INSERT OR REPLACE INTO tasks (id, doc) VALUES (?1, ?2)", params![task.id.0 as i64, to_doc(task)])?;
        Ok(())
    }

    /// Membership is not stored; it is rebuilt from the log.
    pub fn put_room(&self, room: &Room, ord: u64) -> Result<()> {
        let mut doc = room.clone();
        doc.members.clear();
        self.conn.execute(
            "INSERT INTO rooms (id, ord, doc) VALUES (?1, ?2, ?3) ON CONFLICT(id) DO UPDATE SET doc = excluded.doc",
            params![room.id.0, ord as i64, to_doc(&doc)],
        )?;
        Ok(())
    }

    pub fn put_user(&self, user: &User) -> Result<()> {
        let mut doc = user.clone();
        doc.rooms.clear();
        doc.connected = false;
        self.conn.execute("INSERT OR REPLACE INTO users (id, doc) VALUES (?1, ?2)", params![user.id.0 as i64, to_doc(&doc)])?;
        Ok(())
    }

    pub fn append_event(&self, entry: &LogEntry) -> Result<()> {
        self.conn.execute(
            "INSERT INTO events (room, seq, doc) VALUES (?1, ?2, ?3)",
            params![entry.room.0, entry.seq as i64, to_doc(entry)],
        )?;
        Ok(())
    }

    pub fn append_audit(&self, entry: &AuditEntry) -> Result<()> {
        self.conn.execute("INSERT INTO audit (doc) VALUES (?1)", [to_doc(entry)])?;
        Ok(())
    }

    pub fn load(&self) -> Result<Snapshot> {
        fn docs<T: for<'de> Deserialize<'de>>(conn: &Connection, sql: &str) -> Result<Vec<T>> {
            let mut stmt = conn.prepare(sql)?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            let mut out = Vec::new();
            for row in rows {
                out.push(from_doc(&row?)?);
            }
            Ok(out)
        }
        let mut layouts = Vec::new();
        {
            let mut stmt = self.conn.prepare("SELECT id, source FROM layouts ORDER BY id")?;
            let rows = stmt.query_map([], |r| Ok((LayoutId(r.get::<_, i64>(0)? as u64), r.get::<_, String>(1)?)))?;
            for row in rows {
                layouts.push(row?);
            }
        }
        Ok(Snapshot {
            tokens: docs(&self.conn, "SELECT doc FROM tokens ORDER BY id")?,
            layouts,
            tasks: docs(&self.conn, "SELECT doc FROM tasks ORDER BY id")?,
            rooms: docs(&self.conn, "SELECT doc FROM rooms ORDER BY ord")?,
            users: docs(&self.conn, "SELECT doc FROM users ORDER BY id")?,
            events: docs(&self.conn, "SELECT doc FROM events ORDER BY room, seq")?,
            audit: docs(&self.conn, "SELECT doc FROM audit ORDER BY id")?,
        })
    }
}
