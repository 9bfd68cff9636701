//! One directory per room: `room.json` (state at creation), `events.log`
//! (append-only JSON lines) and `snapshot.json` (state at a session
//! boundary). Loading starts from the newest of the two states and replays
//! the log entries after it.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chronochat_core::dataset::{append_conversation, import_conversations_str, Conversation, FILE_EXTENSION};

use crate::room::{Room, RoomError, RoomEvent};

const ROOM_FILE: &str = "room.json";
const LOG_FILE: &str = "events.log";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> RoomError {
    RoomError::Storage(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, text: &str) -> Result<(), RoomError> {
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    file.write_all(text.as_bytes()).map_err(|e| storage(&tmp, e))?;
    file.sync_all().map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}

fn read_room(path: &Path) -> Result<Room, RoomError> {
    let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
    serde_json::from_str(&text).map_err(|e| storage(path, e))
}

impl Store {
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Store, RoomError> {
        let root: PathBuf = data_dir.into();
        let rooms = root.join("rooms");
        fs::create_dir_all(&rooms).map_err(|e| storage(&rooms, e))?;
        Ok(Store { root })
    }

    pub fn data_dir(&self) -> &Path {
        &self.root
    }

    fn room_dir(&self, room_id: &str) -> PathBuf {
        self.root.join("rooms").join(room_id)
    }

    pub fn conversations_path(&self) -> PathBuf {
        self.root.join(format!("conversations{FILE_EXTENSION}"))
    }

    pub fn create_room(&self, room: &Room) -> Result<(), RoomError> {
        let dir = self.room_dir(&room.room_id);
        fs::create_dir_all(&dir).map_err(|e| storage(&dir, e))?;
        write_atomic(&dir.join(ROOM_FILE), &serde_json::to_string(room).expect("room serializes"))?;
        let log = dir.join(LOG_FILE);
        File::create(&log).map_err(|e| storage(&log, e))?;
        Ok(())
    }

    /// Appends one event. `sync` forces it to disk before returning.
    pub fn append_event(&self, room_id: &str, event: &RoomEvent, sync: bool) -> Result<(), RoomError> {
        let path = self.room_dir(room_id).join(LOG_FILE);
        let mut file = OpenOptions::new().append(true).open(&path).map_err(|e| storage(&path, e))?;
        let mut line = serde_json::to_string(event).expect("event serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| storage(&path, e))?;
        if sync {
            file.sync_data().map_err(|e| storage(&path, e))?;
        }
        Ok(())
    }

    pub fn snapshot(&self, room: &Room) -> Result<(), RoomError> {
        let path = self.room_dir(&room.room_id).join(SNAPSHOT_FILE);
        write_atomic(&path, &serde_json::to_string(room).expect("room serializes"))
    }

    /// Every event in the log, oldest first. A torn final line (crash
    /// mid-write) is dropped; damage anywhere else is an error.
    pub fn read_events(&self, room_id: &str) -> Result<Vec<RoomEvent>, RoomError> {
        let path = self.room_dir(room_id).join(LOG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| storage(&path, e))?;
        let lines: Vec<&str> = text.split('\n').collect();
        let mut events = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RoomEvent>(line) {
                Ok(e) => events.push(e),
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(RoomError::CorruptLog(format!("{} line {}: {e}", path.display(), i + 1))),
            }
        }
        Ok(events)
    }

    pub fn load_room(&self, room_id: &str) -> Result<(Room, Vec<RoomEvent>), RoomError> {
        let dir = self.room_dir(room_id);
        let snapshot = dir.join(SNAPSHOT_FILE);
        let mut room = if snapshot.exists() {
            read_room(&snapshot)?
        } else {
            read_room(&dir.join(ROOM_FILE))?
        };
        let events = self.read_events(room_id)?;
        let start = room.seq;
        for event in events.iter().filter(|e| e.seq > start) {
            room.apply(event)?;
        }
        Ok((room, events))
    }

    pub fn room_ids(&self) -> Result<Vec<String>, RoomError> {
        let rooms = self.root.join("rooms");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&rooms).map_err(|e| storage(&rooms, e))? {
            let entry = entry.map_err(|e| storage(&rooms, e))?;
            if entry.path().join(ROOM_FILE).exists() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Appends `conversation` unless a record with its id is already there.
    pub fn record_conversation(&self, conversation: &Conversation) -> Result<bool, RoomError> {
        let path = self.conversations_path();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| storage(&path, e))?;
            let (existing, _) = import_conversations_str(&text);
            if existing.iter().any(|c| c.id == conversation.id) {
                return Ok(false);
            }
        }
        append_conversation(&path, conversation).map_err(|e| storage(&path, e))?;
        Ok(true)
    }
}
