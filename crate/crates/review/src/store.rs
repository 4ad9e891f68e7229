//! On-disk session store.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<id>/events.jsonl   append-only event log
//! sessions/<id>/images/*.png   generated candidates
//! sessions/<id>/accepted.jsonl export fragment, once exported
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::ReviewError;
use crate::model::{validate_prompt, Event, ReviewSession};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const FRAGMENT_FILE: &str = "accepted.jsonl";

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub struct Store {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<ReviewSession>>>>,
}

impl Store {
    /// Opens the store and replays every session log found under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let root = root.into();
        let dir = root.join("sessions");
        std::fs::create_dir_all(&dir).map_err(|e| ReviewError::io(dir.display().to_string(), e))?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| ReviewError::io(dir.display().to_string(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| ReviewError::io(dir.display().to_string(), e))?.path();
            let log = path.join(EVENTS_FILE);
            if !log.is_file() {
                continue;
            }
            let session = ReviewSession::replay(&read_log(&log)?)
                .map_err(|e| ReviewError::Corrupt(format!("{}: {e}", log.display())))?;
            sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
        }
        log::info!("review store at {} holds {} session(s)", root.display(), sessions.len());
        Ok(Self { root, sessions: Mutex::new(sessions) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn create(&self, prompt: &str) -> Result<ReviewSession, ReviewError> {
        validate_prompt(prompt)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let event = Event::Created { session: id.clone(), prompt: prompt.to_string(), at_ms: now_ms() };
        let session = ReviewSession::replay(std::slice::from_ref(&event))?;
        let dir = self.session_dir(&id);
        std::fs::create_dir_all(dir.join("images")).map_err(|e| ReviewError::io(dir.display().to_string(), e))?;
        append(&dir.join(EVENTS_FILE), &event)?;
        self.sessions.lock().expect("store lock").insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<ReviewSession>>, ReviewError> {
        self.sessions
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ReviewError::NotFound(format!("session {id}")))
    }

    pub fn get(&self, id: &str) -> Result<ReviewSession, ReviewError> {
        Ok(self.handle(id)?.lock().expect("session lock").clone())
    }

    /// Runs `f` with the session locked. If it returns an event, the event
    /// is validated, appended to the log and applied; nothing changes when
    /// any of those steps fail.
    pub fn commit<T>(
        &self,
        id: &str,
        f: impl FnOnce(&ReviewSession, &Path) -> Result<(Option<Event>, T), ReviewError>,
    ) -> Result<(ReviewSession, T), ReviewError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock");
        let dir = self.session_dir(id);
        let (event, out) = f(&session, &dir)?;
        if let Some(event) = event {
            let mut next = session.clone();
            next.apply(&event)?;
            append(&dir.join(EVENTS_FILE), &event)?;
            *session = next;
        }
        Ok((session.clone(), out))
    }
}

fn append(path: &Path, event: &Event) -> Result<(), ReviewError> {
    let mut line = serde_json::to_string(event).expect("events serialize");
    line.push('\n');
    let ctx = || path.display().to_string();
    let mut f: File = OpenOptions::new().create(true).append(true).open(path).map_err(|e| ReviewError::io(ctx(), e))?;
    f.write_all(line.as_bytes()).map_err(|e| ReviewError::io(ctx(), e))?;
    f.sync_data().map_err(|e| ReviewError::io(ctx(), e))
}

/// Reads a log. A final line without a newline is a write cut short by a
/// crash; it is dropped with a warning rather than failing the whole log.
pub fn read_log(path: &Path) -> Result<Vec<Event>, ReviewError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReviewError::io(path.display().to_string(), e))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(e) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: dropping torn final line ({e})", path.display());
            }
            Err(e) => return Err(ReviewError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(events)
}
