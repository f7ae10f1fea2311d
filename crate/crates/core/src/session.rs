//! Session state: the replayable record of one generation session, its
//! status machine, edit requests and content-addressed blob storage.

use std::collections::HashMap;
use std::fmt;
use std::sync::RwLock;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::coordinator::EnrichedPrompt;
use crate::digest::sha256_hex;
use crate::image::mask_from_png;
use crate::layout::{CanvasSpec, Rect, ScenePlan, DEFAULT_CANVAS};
use crate::spatial::{rasterize_mask, MaskRaster};

/// The user's request: text plus optional attached image refs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrompt {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
}

impl UserPrompt {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            attachments: Vec::new(),
        }
    }

    pub fn with_attachment(mut self, image_ref: impl Into<String>) -> Self {
        self.attachments.push(image_ref.into());
        self
    }

    pub fn is_valid(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSettings {
    #[serde(default)]
    pub canvas: CanvasSpec,
    /// Interactive sessions pause in `awaiting_user` after each pipeline run.
    #[serde(default)]
    pub interactive: bool,
    #[serde(default)]
    pub base_seed: u64,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            canvas: DEFAULT_CANVAS,
            interactive: false,
            base_seed: 0,
        }
    }
}

/// Where a failed session picks up again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Planning,
    Generating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Planning,
    Generating,
    AwaitingUser,
    Failed { reason: String, resume: Phase },
    Complete,
}

impl SessionStatus {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Planning => "planning",
            Self::Generating => "generating",
            Self::AwaitingUser => "awaiting_user",
            Self::Failed { .. } => "failed",
            Self::Complete => "complete",
        }
    }

    /// Whether `self -> next` is an edge of the status machine.
    pub fn can_transition(&self, next: &SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, next),
            (_, Failed { .. })
                | (Planning, Planning | Generating)
                | (Generating, Generating | AwaitingUser | Complete)
                | (AwaitingUser, Generating | Complete)
                | (Complete, Generating)
                | (
                    Failed {
                        resume: Phase::Planning,
                        ..
                    },
                    Planning
                )
                | (
                    Failed {
                        resume: Phase::Generating,
                        ..
                    },
                    Generating
                )
        )
    }

    pub fn accepts_edits(&self) -> bool {
        matches!(self, Self::AwaitingUser | Self::Complete)
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Failed { reason, .. } => write!(f, "failed({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

/// A recorded pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: String,
    pub image: String,
    pub plan: ScenePlan,
    /// Blob ref of the mask PNG the stage was inpainted through.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// A unit of pending pipeline work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "job", rename_all = "snake_case")]
pub enum Job {
    Background,
    Object { name: String },
    Erase { mask: MaskSpec, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    Rect(Rect),
    PngBase64(String),
}

impl MaskSpec {
    pub fn to_raster(&self, canvas: CanvasSpec) -> Result<MaskRaster, String> {
        let mask = match self {
            Self::Rect(r) => rasterize_mask(*r, canvas).map_err(|e| e.to_string())?,
            Self::PngBase64(data) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(data.trim())
                    .map_err(|e| format!("mask is not valid base64: {e}"))?;
                mask_from_png(&bytes).map_err(|e| e.to_string())?
            }
        };
        if mask.width != canvas.width || mask.height != canvas.height {
            return Err(format!(
                "mask is {}x{}, canvas is {canvas}",
                mask.width, mask.height
            ));
        }
        if mask.is_empty() {
            return Err("mask is empty".into());
        }
        Ok(mask)
    }
}

/// The user-supplied part of a new object; the planner fills in the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDraft {
    pub name: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounding_box: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditRequest {
    RemoveRegion {
        mask: MaskSpec,
    },
    AddObject {
        draft: ObjectDraft,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
    ModifyObject {
        name: String,
        instruction: String,
    },
}

impl EditRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::RemoveRegion { .. } => "remove_region",
            Self::AddObject { .. } => "add_object",
            Self::ModifyObject { .. } => "modify_object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleEntry {
    pub step: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub prompt: UserPrompt,
    #[serde(default)]
    pub settings: SessionSettings,
    #[serde(default)]
    pub enriched: Option<EnrichedPrompt>,
    #[serde(default)]
    pub plan: Option<ScenePlan>,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub edits: Vec<EditRequest>,
    pub status: SessionStatus,
    #[serde(default)]
    pub pending: Vec<Job>,
    #[serde(default)]
    pub rationale: Vec<RationaleEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl SessionState {
    pub fn new(id: impl Into<String>, prompt: UserPrompt, settings: SessionSettings) -> Self {
        Self {
            id: id.into(),
            prompt,
            settings,
            enriched: None,
            plan: None,
            stages: Vec::new(),
            edits: Vec::new(),
            status: SessionStatus::Planning,
            pending: Vec::new(),
            rationale: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn composite(&self) -> Option<&Stage> {
        self.stages.last()
    }

    /// Moves to `next`, refusing edges the status machine does not have.
    pub fn transition(&mut self, next: SessionStatus) -> Result<(), String> {
        if !self.status.can_transition(&next) {
            return Err(format!("cannot move from {} to {}", self.status, next));
        }
        self.status = next;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Blob storage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("blob store I/O: {0}")]
    Io(String),
}

/// Content-addressed byte storage; refs have the form `sha256:<hex>`.
pub trait BlobStore: Send + Sync {
    fn put(&self, bytes: &[u8]) -> Result<String, BlobError>;
    fn get(&self, blob_ref: &str) -> Result<Vec<u8>, BlobError>;
}

pub fn blob_ref(bytes: &[u8]) -> String {
    format!("sha256:{}", sha256_hex(bytes))
}

#[derive(Debug, Default)]
pub struct MemoryBlobStore {
    blobs: RwLock<HashMap<String, Vec<u8>>>,
}

impl MemoryBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.read().expect("blob lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BlobStore for MemoryBlobStore {
    fn put(&self, bytes: &[u8]) -> Result<String, BlobError> {
        let r = blob_ref(bytes);
        self.blobs
            .write()
            .expect("blob lock")
            .entry(r.clone())
            .or_insert_with(|| bytes.to_vec());
        Ok(r)
    }

    fn get(&self, blob_ref: &str) -> Result<Vec<u8>, BlobError> {
        self.blobs
            .read()
            .expect("blob lock")
            .get(blob_ref)
            .cloned()
            .ok_or_else(|| BlobError::NotFound(blob_ref.to_string()))
    }
}
