//! The language-model boundary: completion requests, request digests and
//! deterministic replay from recorded transcripts.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::BackendError;
use crate::digest::{canonical_json, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageRef { image_ref: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.content.push(ContentPart::ImageRef {
            image_ref: image_ref.into(),
        });
        self
    }
}

/// One completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("requests always serialize"))
    }

    /// Hex SHA-256 of the canonical JSON form; the replay key.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

/// A text-completion backend. Implementations must tolerate concurrent use.
pub trait PlannerBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

impl<P: PlannerBackend + ?Sized> PlannerBackend for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<P: PlannerBackend + ?Sized> PlannerBackend for std::sync::Arc<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Transcripts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_digest: String,
    pub response: String,
}

/// Recorded request/response pairs, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn read(reader: impl BufRead) -> std::io::Result<Self> {
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }
}

/// Serves recorded responses by request digest.
///
/// Several entries under one digest are served in recording order; once they
/// run out the last one keeps being served, so a resumed session can repeat
/// a step it already completed. A digest with no entries is an error.
#[derive(Debug)]
pub struct ReplayPlanner {
    responses: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ReplayPlanner {
    pub fn new(transcript: Transcript) -> Self {
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for e in transcript.entries {
            responses
                .entry(e.request_digest)
                .or_default()
                .push(e.response);
        }
        Self {
            responses,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(Self::new(Transcript::read(std::io::BufReader::new(file))?))
    }
}

impl PlannerBackend for ReplayPlanner {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        let Some(list) = self.responses.get(&digest) else {
            return Err(BackendError::NoTranscriptEntry { digest });
        };
        let mut cursors = self.cursors.lock().expect("replay cursor lock");
        let cursor = cursors.entry(digest).or_insert(0);
        let idx = (*cursor).min(list.len() - 1);
        *cursor += 1;
        Ok(list[idx].clone())
    }
}

/// Answers with queued responses in call order, ignoring the request.
/// Used to author transcripts.
#[derive(Debug, Default)]
pub struct ScriptedPlanner {
    queue: Mutex<VecDeque<String>>,
}

impl ScriptedPlanner {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }
}

impl PlannerBackend for ScriptedPlanner {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.queue
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| BackendError::NoTranscriptEntry {
                digest: request.digest(),
            })
    }
}

/// Wraps a backend and records every successful exchange.
#[derive(Debug)]
pub struct RecordingPlanner<P> {
    inner: P,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl<P> RecordingPlanner<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            entries: self.entries.lock().expect("recording lock").clone(),
        }
    }

    pub fn calls(&self) -> usize {
        self.entries.lock().expect("recording lock").len()
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: PlannerBackend> PlannerBackend for RecordingPlanner<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let response = self.inner.complete(request)?;
        self.entries
            .lock()
            .expect("recording lock")
            .push(TranscriptEntry {
                request_digest: request.digest(),
                response: response.clone(),
            });
        Ok(response)
    }
}

// ---------------------------------------------------------------------------
// Reply parsing
// ---------------------------------------------------------------------------

/// The structured tail of a reply: the last fenced ```json block, or failing
/// that the last balanced top-level `{...}` that parses as JSON.
pub fn structured_tail(reply: &str) -> Option<&str> {
    if let Some(block) = last_fenced_block(reply) {
        return Some(block);
    }
    last_json_object(reply)
}

fn last_fenced_block(reply: &str) -> Option<&str> {
    let mut found = None;
    let mut rest = reply;
    let mut base = 0;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1)?;
        let body = &after[body_start..];
        let end = body.find("```")?;
        let abs_start = base + start + 3 + body_start;
        found = Some(&reply[abs_start..abs_start + end]);
        let consumed = start + 3 + body_start + end + 3;
        base += consumed;
        rest = &rest[consumed..];
    }
    found
        .map(str::trim)
        .filter(|b| b.starts_with('{') || b.starts_with('['))
}

fn last_json_object(reply: &str) -> Option<&str> {
    let bytes = reply.as_bytes();
    let mut best = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = balanced_end(bytes, i) {
                let candidate = &reply[i..=end];
                if serde_json::from_str::<Value>(candidate).is_ok() {
                    best = Some(candidate);
                    i = end + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    best
}

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}
