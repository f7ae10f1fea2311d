//! Durable session storage: state snapshots, content-addressed blobs and the
//! per-session event log.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use layercraft_core::session::{blob_ref, BlobError, BlobStore, SessionState};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store record at {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One entry of a session's event stream. Sequence numbers start at 1 and
/// have no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
}

pub trait SessionStore: BlobStore {
    fn put_session(&self, state: &SessionState) -> Result<(), StoreError>;
    fn get_session(&self, id: &str) -> Result<SessionState, StoreError>;
    fn list_sessions(&self) -> Result<Vec<String>, StoreError>;
    fn delete_session(&self, id: &str) -> Result<(), StoreError>;

    /// Appends an event with the next sequence number.
    fn append_event(&self, id: &str, kind: &str, payload: Value) -> Result<Event, StoreError>;
    /// Events with `seq > since`, in order.
    fn events(&self, id: &str, since: u64) -> Result<Vec<Event>, StoreError>;

    /// Side records kept next to a session (for example backend choices).
    fn put_meta(&self, id: &str, key: &str, value: &Value) -> Result<(), StoreError>;
    fn get_meta(&self, id: &str, key: &str) -> Result<Option<Value>, StoreError>;
}

// ---------------------------------------------------------------------------
// In-memory
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct MemoryInner {
    sessions: BTreeMap<String, SessionState>,
    events: HashMap<String, Vec<Event>>,
    meta: HashMap<(String, String), Value>,
    blobs: HashMap<String, Vec<u8>>,
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    inner: Mutex<MemoryInner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobStore for MemoryStore {
    fn put(&self, bytes: &[u8]) -> Result<String, BlobError> {
        let r = blob_ref(bytes);
        self.inner
            .lock()
            .expect("store lock")
            .blobs
            .entry(r.clone())
            .or_insert_with(|| bytes.to_vec());
        Ok(r)
    }

    fn get(&self, blob: &str) -> Result<Vec<u8>, BlobError> {
        self.inner
            .lock()
            .expect("store lock")
            .blobs
            .get(blob)
            .cloned()
            .ok_or_else(|| BlobError::NotFound(blob.to_string()))
    }
}

impl SessionStore for MemoryStore {
    fn put_session(&self, state: &SessionState) -> Result<(), StoreError> {
        self.inner
            .lock()
            .expect("store lock")
            .sessions
            .insert(state.id.clone(), state.clone());
        Ok(())
    }

    fn get_session(&self, id: &str) -> Result<SessionState, StoreError> {
        self.inner
            .lock()
            .expect("store lock")
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn list_sessions(&self) -> Result<Vec<String>, StoreError> {
        Ok(self
            .inner
            .lock()
            .expect("store lock")
            .sessions
            .keys()
            .cloned()
            .collect())
    }

    fn delete_session(&self, id: &str) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        inner
            .sessions
            .remove(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        inner.events.remove(id);
        inner.meta.retain(|(sid, _), _| sid != id);
        Ok(())
    }

    fn append_event(&self, id: &str, kind: &str, payload: Value) -> Result<Event, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        let log = inner.events.entry(id.to_string()).or_default();
        let event = Event {
            seq: log.len() as u64 + 1,
            kind: kind.to_string(),
            payload,
        };
        log.push(event.clone());
        Ok(event)
    }

    fn events(&self, id: &str, since: u64) -> Result<Vec<Event>, StoreError> {
        let inner = self.inner.lock().expect("store lock");
        Ok(inner
            .events
            .get(id)
            .map(|log| log.iter().filter(|e| e.seq > since).cloned().collect())
            .unwrap_or_default())
    }

    fn put_meta(&self, id: &str, key: &str, value: &Value) -> Result<(), StoreError> {
        self.inner
            .lock()
            .expect("store lock")
            .meta
            .insert((id.to_string(), key.to_string()), value.clone());
        Ok(())
    }

    fn get_meta(&self, id: &str, key: &str) -> Result<Option<Value>, StoreError> {
        Ok(self
            .inner
            .lock()
            .expect("store lock")
            .meta
            .get(&(id.to_string(), key.to_string()))
            .cloned())
    }
}

// ---------------------------------------------------------------------------
// File-backed
// ---------------------------------------------------------------------------

/// Directory layout:
///
/// ```text
/// root/sessions/<id>/state.json    canonical session snapshot
/// root/sessions/<id>/events.jsonl  one event per line
/// root/sessions/<id>/<key>.json    side records
/// root/blobs/<hex>                 content-addressed bytes
/// ```
///
/// Snapshots are written to a temporary file and renamed into place, so a
/// crash leaves either the old or the new state.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    event_lock: Mutex<()>,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in [root.join("sessions"), root.join("blobs")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self {
            root,
            event_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(StoreError::NotFound(id.to_string()));
        }
        Ok(self.root.join("sessions").join(id))
    }

    fn blob_path(&self, blob: &str) -> Result<PathBuf, BlobError> {
        let hex = blob
            .strip_prefix("sha256:")
            .filter(|h| h.len() == 64 && h.chars().all(|c| c.is_ascii_hexdigit()))
            .ok_or_else(|| BlobError::NotFound(blob.to_string()))?;
        Ok(self.root.join("blobs").join(hex))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

impl BlobStore for FileStore {
    fn put(&self, bytes: &[u8]) -> Result<String, BlobError> {
        let r = blob_ref(bytes);
        let path = self.blob_path(&r)?;
        if !path.exists() {
            write_atomic(&path, bytes).map_err(|e| BlobError::Io(e.to_string()))?;
        }
        Ok(r)
    }

    fn get(&self, blob: &str) -> Result<Vec<u8>, BlobError> {
        let path = self.blob_path(blob)?;
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => BlobError::NotFound(blob.to_string()),
            _ => BlobError::Io(format!("{}: {e}", path.display())),
        })
    }
}

impl SessionStore for FileStore {
    fn put_session(&self, state: &SessionState) -> Result<(), StoreError> {
        let dir = self.session_dir(&state.id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut text = serde_json::to_string_pretty(state).expect("session states serialize");
        text.push('\n');
        write_atomic(&dir.join("state.json"), text.as_bytes())
    }

    fn get_session(&self, id: &str) -> Result<SessionState, StoreError> {
        let path = self.session_dir(id)?.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(id.to_string()),
            _ => StoreError::Io {
                path: path.clone(),
                source: e,
            },
        })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    fn list_sessions(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("sessions");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().join("state.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn delete_session(&self, id: &str) -> Result<(), StoreError> {
        let dir = self.session_dir(id)?;
        if !dir.join("state.json").is_file() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        fs::remove_dir_all(&dir).map_err(io_err(&dir))
    }

    fn append_event(&self, id: &str, kind: &str, payload: Value) -> Result<Event, StoreError> {
        let _guard = self.event_lock.lock().expect("event lock");
        let dir = self.session_dir(id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("events.jsonl");
        let seq = self.events(id, 0)?.last().map_or(1, |e| e.seq + 1);
        let event = Event {
            seq,
            kind: kind.to_string(),
            payload,
        };
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        // Drop a torn tail so the new record starts on its own line.
        let existing = fs::read(&path).map_err(io_err(&path))?;
        let complete = existing
            .iter()
            .rposition(|&b| b == b'\n')
            .map_or(0, |p| p + 1);
        if complete < existing.len() {
            file.set_len(complete as u64).map_err(io_err(&path))?;
        }
        let mut line = serde_json::to_string(&event).expect("events serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        Ok(event)
    }

    fn events(&self, id: &str, since: u64) -> Result<Vec<Event>, StoreError> {
        let path = self.session_dir(id)?.join("events.jsonl");
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            // A torn final line from a crash mid-append is dropped.
            let Ok(event) = serde_json::from_str::<Event>(&line) else {
                break;
            };
            if event.seq > since {
                out.push(event);
            }
        }
        Ok(out)
    }

    fn put_meta(&self, id: &str, key: &str, value: &Value) -> Result<(), StoreError> {
        let dir = self.session_dir(id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let text = serde_json::to_string_pretty(value).expect("values serialize");
        write_atomic(&dir.join(format!("{key}.json")), text.as_bytes())
    }

    fn get_meta(&self, id: &str, key: &str) -> Result<Option<Value>, StoreError> {
        let path = self.session_dir(id)?.join(format!("{key}.json"));
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| StoreError::Corrupt {
                    path,
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }
}
