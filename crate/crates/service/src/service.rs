//! Session operations: create, advance, edit, finish and export.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use layercraft_core::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, StepEvent};
use layercraft_core::digest::sha256_hex;
use layercraft_core::image::ImageBackend;
use layercraft_core::layout::serialize_plan;
use layercraft_core::planner::PlannerBackend;
use layercraft_core::session::{
    BlobError, EditRequest, SessionSettings, SessionState, SessionStatus, UserPrompt,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::store::{Event, SessionStore, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<BlobError> for ServiceError {
    fn from(e: BlobError) -> Self {
        Self::Coordinator(CoordinatorError::Blob(e))
    }
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Store(StoreError::NotFound(_)) => "NotFound",
            Self::Store(_) => "StoreError",
            Self::Coordinator(e) => e.code(),
            Self::Precondition(_) => "Precondition",
            Self::Io { .. } => "IOError",
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub session: String,
    pub status: String,
    pub files: Vec<ManifestEntry>,
}

/// The session front door. Operations on one session are serialized by a
/// per-session lease; different sessions proceed independently.
pub struct Service {
    store: Arc<dyn SessionStore>,
    planner: Arc<dyn PlannerBackend>,
    images: Arc<dyn ImageBackend>,
    config: CoordinatorConfig,
    leases: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    live: broadcast::Sender<(String, Event)>,
}

impl Service {
    pub fn new(
        store: Arc<dyn SessionStore>,
        planner: Arc<dyn PlannerBackend>,
        images: Arc<dyn ImageBackend>,
        config: CoordinatorConfig,
    ) -> Self {
        let (live, _) = broadcast::channel(1024);
        Self {
            store,
            planner,
            images,
            config,
            leases: Mutex::new(HashMap::new()),
            live,
        }
    }

    pub fn store(&self) -> &Arc<dyn SessionStore> {
        &self.store
    }

    /// Live events from every session, as they are appended.
    pub fn subscribe(&self) -> broadcast::Receiver<(String, Event)> {
        self.live.subscribe()
    }

    fn lease(&self, id: &str) -> Arc<Mutex<()>> {
        self.leases
            .lock()
            .expect("lease table lock")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    fn coordinator(&self) -> Coordinator<'_> {
        Coordinator::new(&self.config, &*self.planner, &*self.images, &*self.store)
    }

    fn emit(&self, id: &str, kind: &str, payload: serde_json::Value) -> Result<Event> {
        let event = self.store.append_event(id, kind, payload)?;
        // Nobody listening is fine.
        let _ = self.live.send((id.to_string(), event.clone()));
        Ok(event)
    }

    fn emit_all(&self, id: &str, events: Vec<StepEvent>) -> Result<()> {
        for e in events {
            self.emit(id, &e.kind, e.payload)?;
        }
        Ok(())
    }

    fn emit_status(&self, id: &str, before: &SessionStatus, after: &SessionStatus) -> Result<()> {
        if before != after {
            self.emit(
                id,
                "status",
                json!({"from": before.name(), "to": after.name(), "detail": after.to_string()}),
            )?;
        }
        Ok(())
    }

    pub fn create_session(
        &self,
        prompt: UserPrompt,
        settings: SessionSettings,
    ) -> Result<SessionState> {
        if !prompt.is_valid() {
            return Err(CoordinatorError::InvalidPrompt("the prompt is empty".into()).into());
        }
        if !settings.canvas.is_valid() {
            return Err(ServiceError::Precondition(format!(
                "canvas {} is not usable",
                settings.canvas
            )));
        }
        let id = format!("{:032x}", rand::random::<u128>());
        let state = SessionState::new(id.clone(), prompt, settings);
        self.store.put_session(&state)?;
        self.emit(&id, "created", json!({"prompt": state.prompt.text}))?;
        Ok(state)
    }

    pub fn get(&self, id: &str) -> Result<SessionState> {
        Ok(self.store.get_session(id)?)
    }

    /// Runs one coordinator step and persists the result. Sessions awaiting
    /// the user or complete are left alone with a warning event; a failed
    /// session resumes.
    pub fn advance(&self, id: &str) -> Result<SessionState> {
        let lease = self.lease(id);
        let _held = lease.lock().expect("session lease");
        let mut state = self.store.get_session(id)?;
        if !matches!(
            state.status,
            SessionStatus::Planning | SessionStatus::Generating | SessionStatus::Failed { .. }
        ) {
            self.emit(
                id,
                "warning",
                json!({"message": format!("advance ignored in status {}", state.status.name())}),
            )?;
            return Ok(state);
        }
        let before = state.status.clone();
        let outcome = self.coordinator().step(&mut state);
        self.store.put_session(&state)?;
        match outcome {
            Ok(events) => {
                self.emit_all(id, events)?;
                self.emit_status(id, &before, &state.status)?;
                Ok(state)
            }
            Err(e) => {
                self.emit(
                    id,
                    "failed",
                    json!({"code": e.code(), "message": e.to_string()}),
                )?;
                self.emit_status(id, &before, &state.status)?;
                Err(e.into())
            }
        }
    }

    /// Advances until the session completes, waits for the user or fails.
    pub fn run_until_rest(&self, id: &str) -> Result<SessionState> {
        loop {
            let state = self.advance(id)?;
            if !matches!(
                state.status,
                SessionStatus::Planning | SessionStatus::Generating
            ) {
                return Ok(state);
            }
        }
    }

    pub fn submit_edit(&self, id: &str, edit: EditRequest) -> Result<SessionState> {
        let lease = self.lease(id);
        let _held = lease.lock().expect("session lease");
        let mut state = self.store.get_session(id)?;
        let before = state.status.clone();
        let events = self.coordinator().apply_edit(&mut state, edit)?;
        self.store.put_session(&state)?;
        self.emit_all(id, events)?;
        self.emit_status(id, &before, &state.status)?;
        Ok(state)
    }

    /// Closes an interactive session.
    pub fn finish(&self, id: &str) -> Result<SessionState> {
        let lease = self.lease(id);
        let _held = lease.lock().expect("session lease");
        let mut state = self.store.get_session(id)?;
        if state.status != SessionStatus::AwaitingUser {
            return Err(ServiceError::Precondition(format!(
                "finish needs status awaiting_user, found {}",
                state.status
            )));
        }
        let before = state.status.clone();
        state
            .transition(SessionStatus::Complete)
            .map_err(ServiceError::Precondition)?;
        self.store.put_session(&state)?;
        self.emit_status(id, &before, &state.status)?;
        Ok(state)
    }

    pub fn stage_png(&self, id: &str, index: usize) -> Result<Vec<u8>> {
        let state = self.store.get_session(id)?;
        let stage = state
            .stages
            .get(index)
            .ok_or_else(|| ServiceError::Precondition(format!("stage {index} does not exist")))?;
        Ok(self.store.get(&stage.image)?)
    }

    /// Writes stage images, per-stage plan documents, the reasoning text and
    /// a manifest of file digests into `dir`.
    pub fn export_artifacts(&self, id: &str, dir: &Path) -> Result<Manifest> {
        let state = self.store.get_session(id)?;
        if state.stages.is_empty() {
            return Err(ServiceError::Precondition(
                "the session has no stages to export".into(),
            ));
        }
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for (k, stage) in state.stages.iter().enumerate() {
            files.push((format!("stage_{k:02}.png"), self.store.get(&stage.image)?));
            files.push((
                format!("plan_{k:02}.json"),
                serialize_plan(&stage.plan).into_bytes(),
            ));
        }
        let mut rationale = String::new();
        for entry in &state.rationale {
            rationale.push_str(&format!(
                "## {}\n\n{}\n\n",
                entry.step,
                entry.text.trim_end()
            ));
        }
        files.push(("rationale.txt".into(), rationale.into_bytes()));
        files.sort_by(|a, b| a.0.cmp(&b.0));

        std::fs::create_dir_all(dir).map_err(|source| ServiceError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut entries = Vec::new();
        for (name, bytes) in &files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|source| ServiceError::Io {
                path: path.display().to_string(),
                source,
            })?;
            entries.push(ManifestEntry {
                path: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            session: state.id.clone(),
            status: state.status.name().into(),
            files: entries,
        };
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| ServiceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(manifest)
    }
}
