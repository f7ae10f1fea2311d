//! Layered, layout-controlled image generation.
//!
//! - [`layout`]: scene-plan documents (parse, validate, canonical form)
//! - [`spatial`]: region grid, generation order, box enlargement, masks
//! - [`oin`]: dual-branch attention mixing with LoRA-routed projections
//! - [`image`]: RGBA images, PNG, image backends and the mock renderer
//! - [`planner`]: the language-model boundary and replay transcripts
//! - [`coordinator`]: enrichment, layout planning, verification, pipeline
//! - [`session`]: session state, edits and the status machine

pub mod backend;
pub mod coordinator;
pub mod digest;
pub mod image;
pub mod layout;
pub mod oin;
pub mod planner;
pub mod session;
pub mod spatial;

pub use backend::BackendError;
pub use coordinator::{
    check_consistency, ConsistencyVerdict, Coordinator, CoordinatorConfig, CoordinatorError,
    EnrichedPrompt, Sufficiency,
};
pub use image::{Image, ImageBackend, InpaintRequest, MockImageBackend};
pub use layout::{
    parse_plan, serialize_plan, validate_plan, BackgroundSpec, CanvasSpec, ObjectSpec, Rect,
    Relation, RelationKind, ScenePlan, ValidationReport,
};
pub use planner::{CompletionRequest, PlannerBackend, ReplayPlanner, Transcript};
pub use session::{
    BlobStore, EditRequest, MaskSpec, MemoryBlobStore, SessionState, SessionStatus, UserPrompt,
};
pub use spatial::{enlarge_box, order_objects, rasterize_mask, MaskRaster, RegionName};
