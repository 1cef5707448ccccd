//! Append-only per-room event log with newline-delimited JSON export.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::event::LogEntry;
use crate::model::RoomId;

#[derive(Debug, Default)]
pub struct EventLog {
    rooms: BTreeMap<RoomId, Vec<LogEntry>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seq the next entry for `room` must carry.
    pub fn next_seq(&self, room: &RoomId) -> u64 {
        self.rooms.get(room).map_or(1, |v| v.len() as u64 + 1)
    }

    pub fn last_time(&self, room: &RoomId) -> Option<i64> {
        self.rooms.get(room).and_then(|v| v.last()).map(|e| e.time.millis())
    }

    pub fn create_room(&mut self, room: &RoomId) {
        self.rooms.entry(room.clone()).or_default();
    }

    pub fn has_room(&self, room: &RoomId) -> bool {
        self.rooms.contains_key(room)
    }

    pub fn append(&mut self, entry: LogEntry) -> Result<&LogEntry> {
        let expected = self.next_seq(&entry.room);
        if entry.seq != expected {
            return Err(Error::Ordering(format!("room `{}` expected seq {expected}, got {}", entry.room, entry.seq)));
        }
        let entries = self.rooms.entry(entry.room.clone()).or_default();
        entries.push(entry);
        Ok(entries.last().expect("just pushed"))
    }

    /// Entries with `seq > since`, ascending.
    pub fn since(&self, room: &RoomId, since: u64) -> Option<&[LogEntry]> {
        self.rooms.get(room).map(|v| {
            let start = (since as usize).min(v.len());
            &v[start..]
        })
    }

    pub fn entries(&self, room: &RoomId) -> Option<&[LogEntry]> {
        self.since(room, 0)
    }

    pub fn rooms(&self) -> impl Iterator<Item = (&RoomId, &[LogEntry])> {
        self.rooms.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rooms.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn export(&self, room: &RoomId) -> Result<String> {
        let entries = self.entries(room).ok_or_else(|| Error::not_found("room", room))?;
        Ok(to_ndjson(entries))
    }
}

pub fn to_ndjson(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_ndjson(text: &str) -> Result<Vec<LogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| Error::validation(format!("line {}", i + 1), e.to_string())))
        .collect()
}

/// Mirrors entries to `<dir>/<room>.ndjson` as they are appended.
#[derive(Debug)]
pub struct NdjsonMirror {
    dir: PathBuf,
    files: BTreeMap<RoomId, File>,
}

impl NdjsonMirror {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::Storage(format!("{}: {e}", dir.display())))?;
        Ok(NdjsonMirror { dir, files: BTreeMap::new() })
    }

    pub fn path_for(&self, room: &RoomId) -> PathBuf {
        self.dir.join(format!("{}.ndjson", sanitize(&room.0)))
    }

    /// Rewrites a room's mirror from scratch.
    pub fn rewrite(&mut self, room: &RoomId, entries: &[LogEntry]) -> Result<()> {
        let path = self.path_for(room);
        fs::write(&path, to_ndjson(entries)).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
        self.files.remove(room);
        Ok(())
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        if !self.files.contains_key(&entry.room) {
            let path = self.path_for(&entry.room);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
            self.files.insert(entry.room.clone(), file);
        }
        let file = self.files.get_mut(&entry.room).expect("opened above");
        let mut line = serde_json::to_string(entry).expect("log entry serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| Error::Storage(e.to_string()))
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
