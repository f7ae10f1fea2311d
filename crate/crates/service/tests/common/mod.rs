#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use layercraft_core::coordinator::CoordinatorConfig;
use layercraft_core::image::MockImageBackend;
use layercraft_core::planner::ReplayPlanner;
use layercraft_core::session::{BlobStore, EditRequest, SessionSettings, UserPrompt};
use layercraft_service::{Service, SessionStore};
use serde::Deserialize;
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

#[derive(Debug, Deserialize)]
pub struct Scenario {
    pub prompt: Value,
    pub settings: SessionSettings,
    pub edits: Vec<Value>,
}

pub fn scenario(name: &str) -> Scenario {
    let text =
        std::fs::read_to_string(fixtures().join("scenarios").join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Replaces `file:` references with blob refs of the named fixture files.
pub fn resolve(value: &mut Value, blobs: &dyn BlobStore) {
    match value {
        Value::String(s) if s.starts_with("file:") => {
            let bytes = std::fs::read(fixtures().join(&s["file:".len()..])).unwrap();
            *s = blobs.put(&bytes).unwrap();
        }
        Value::Array(items) => items.iter_mut().for_each(|v| resolve(v, blobs)),
        Value::Object(map) => map.values_mut().for_each(|v| resolve(v, blobs)),
        _ => {}
    }
}

pub fn prompt(sc: &Scenario, blobs: &dyn BlobStore) -> UserPrompt {
    let mut value = sc.prompt.clone();
    resolve(&mut value, blobs);
    serde_json::from_value(value).unwrap()
}

pub fn edits(sc: &Scenario, blobs: &dyn BlobStore) -> Vec<EditRequest> {
    sc.edits
        .iter()
        .map(|e| {
            let mut e = e.clone();
            resolve(&mut e, blobs);
            serde_json::from_value(e).unwrap()
        })
        .collect()
}

pub fn replay(name: &str) -> Arc<ReplayPlanner> {
    Arc::new(
        ReplayPlanner::from_file(fixtures().join("transcripts").join(format!("{name}.jsonl")))
            .unwrap(),
    )
}

pub fn service(store: Arc<dyn SessionStore>, planner: Arc<ReplayPlanner>) -> Service {
    Service::new(
        store,
        planner,
        Arc::new(MockImageBackend),
        CoordinatorConfig::default(),
    )
}

/// Creates a session for the scenario in `service`'s store.
pub fn create(service: &Service, name: &str) -> String {
    let sc = scenario(name);
    let prompt = prompt(&sc, &**service.store());
    service.create_session(prompt, sc.settings).unwrap().id
}
