#![allow(dead_code)]

use std::path::{Path, PathBuf};

use layercraft_core::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError};
use layercraft_core::image::{mock_generate, Image, ImageBackend};
use layercraft_core::layout::CanvasSpec;
use layercraft_core::planner::PlannerBackend;
use layercraft_core::session::{
    BlobStore, EditRequest, MemoryBlobStore, SessionSettings, SessionState, UserPrompt,
};
use serde::Deserialize;
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[derive(Debug, Deserialize)]
pub struct Scenario {
    pub prompt: UserPrompt,
    pub settings: SessionSettings,
    pub replies: Vec<String>,
    pub edits: Vec<Value>,
}

pub const SCENARIOS: &[&str] = &[
    "alice",
    "car",
    "decoration",
    "layout_retry",
    "robust_malformed_then_valid",
    "robust_persistent_invalid",
    "skip",
    "two_object",
];

pub fn scenario(name: &str) -> Scenario {
    let text =
        std::fs::read_to_string(fixtures().join("scenarios").join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Reference images used by the scenarios, rebuilt from the mock renderer.
pub fn fixture_images() -> Vec<(&'static str, Image)> {
    vec![
        (
            "images/living_room.png",
            mock_generate(
                "a minimalist living room photo",
                CanvasSpec::new(512, 512),
                2025,
            ),
        ),
        (
            "images/teddy.png",
            mock_generate("a cute teddy bear", CanvasSpec::new(64, 64), 1),
        ),
        (
            "images/lion.png",
            mock_generate("a cute lion", CanvasSpec::new(64, 64), 1),
        ),
    ]
}

/// Replaces `file:` references with blob refs of the named fixture files.
fn resolve(value: &mut Value, blobs: &dyn BlobStore) {
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

pub struct Outcome {
    pub state: SessionState,
    pub result: Result<(), CoordinatorError>,
    pub blobs: MemoryBlobStore,
}

/// Runs a scenario: the session to rest, then each edit to rest.
pub fn drive(name: &str, planner: &dyn PlannerBackend, images: &dyn ImageBackend) -> Outcome {
    let sc = scenario(name);
    let blobs = MemoryBlobStore::new();
    let mut prompt = serde_json::to_value(&sc.prompt).unwrap();
    resolve(&mut prompt, &blobs);
    let prompt: UserPrompt = serde_json::from_value(prompt).unwrap();
    let config = CoordinatorConfig::default();
    let coordinator = Coordinator::new(&config, planner, images, &blobs);
    let mut state = SessionState::new(name, prompt, sc.settings);
    let result = (|| {
        coordinator.run_to_rest(&mut state)?;
        for edit in &sc.edits {
            let mut edit = edit.clone();
            resolve(&mut edit, &blobs);
            let edit: EditRequest = serde_json::from_value(edit).unwrap();
            coordinator.apply_edit(&mut state, edit)?;
            coordinator.run_to_rest(&mut state)?;
        }
        Ok(())
    })();
    Outcome {
        state,
        result,
        blobs,
    }
}

pub fn stage_image(outcome: &Outcome, index: usize) -> Image {
    Image::from_png(
        &outcome
            .blobs
            .get(&outcome.state.stages[index].image)
            .unwrap(),
    )
    .unwrap()
}
