//! The central state machine: sufficiency assessment, prompt enrichment,
//! layout planning with corrective re-prompting, output verification, edits
//! and the step-wise generation pipeline.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::BackendError;
use crate::image::{mask_to_png, verify_composite, Image, ImageBackend, InpaintRequest};
use crate::layout::{
    parse_enrichment, parse_plan, serialize_plan, validate_plan, BackgroundSpec, Candidate,
    CanvasSpec, ObjectSpec, ScenePlan, ValidationReport,
};
use crate::planner::{structured_tail, CompletionRequest, Message, PlannerBackend};
use crate::session::{
    BlobError, BlobStore, EditRequest, Job, MaskSpec, Phase, RationaleEntry, SessionState,
    SessionStatus, Stage, UserPrompt,
};
use crate::spatial::{enlarge_box, order_objects, rasterize_mask, relation_edges, MaskRaster};

pub const MAX_RETRIES: u32 = 3;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Exemplar system prompts. Their text is configuration; the defaults ship
/// under `assets/templates`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub sufficiency: String,
    pub identify: String,
    pub additions: String,
    pub layout: String,
    pub add_object: String,
    pub modify_object: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            sufficiency: include_str!("../assets/templates/sufficiency.txt").into(),
            identify: include_str!("../assets/templates/identify.txt").into(),
            additions: include_str!("../assets/templates/additions.txt").into(),
            layout: include_str!("../assets/templates/layout.txt").into(),
            add_object: include_str!("../assets/templates/add_object.txt").into(),
            modify_object: include_str!("../assets/templates/modify_object.txt").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    /// Corrective re-prompts per logical step; a step makes at most
    /// `max_retries + 1` backend calls.
    pub max_retries: u32,
    pub temperature: f64,
    /// Per-channel tolerance for the image consistency check.
    pub tolerance: u8,
    pub templates: Templates,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            max_retries: MAX_RETRIES,
            temperature: DEFAULT_TEMPERATURE,
            tolerance: 0,
            templates: Templates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordinatorError {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("{step}: no usable reply after {attempts} attempts: {last_error}")]
    MalformedReply {
        step: String,
        attempts: u32,
        last_error: String,
    },
    #[error("plan rejected after {attempts} attempts: {feedback}")]
    PlanRejected {
        attempts: u32,
        feedback: String,
        report: Option<ValidationReport>,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("the session has no composite image yet")]
    NoComposite,
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: String, cause: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl CoordinatorError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidPrompt(_) => "InvalidPrompt",
            Self::MalformedReply { .. } => "MalformedReply",
            Self::PlanRejected { .. } => "PlanRejected",
            Self::Backend(BackendError::NoTranscriptEntry { .. }) => "NoTranscriptEntry",
            Self::Backend(BackendError::RemoteRejection(_)) => "RemoteRejection",
            Self::Backend(_) => "BackendError",
            Self::Blob(_) => "StoreError",
            Self::UnknownObject(_) => "UnknownObject",
            Self::NoComposite => "NoComposite",
            Self::InvalidEdit(_) => "InvalidEdit",
            Self::StageFailed { .. } => "StageFailed",
            Self::Precondition(_) => "Precondition",
        }
    }
}

pub type Result<T, E = CoordinatorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sufficiency {
    Enrich,
    Skip,
}

/// The enriched reading of a user prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedPrompt {
    pub background: BackgroundSpec,
    /// Objects identified in the request (or, with a photo, in the photo).
    pub object_candidates: Vec<Candidate>,
    /// Objects the planner suggests adding to the scene.
    #[serde(default)]
    pub additions: Vec<Candidate>,
    /// Raw replies, verbatim. Never parsed for control flow.
    pub rationale: String,
    #[serde(default)]
    pub retry_count: u32,
}

impl EnrichedPrompt {
    /// Objects the pipeline should generate. With an attached photo the
    /// identified objects are already in the picture, so only the additions
    /// are generated.
    pub fn foreground_targets(&self, has_photo: bool) -> Vec<Candidate> {
        if has_photo {
            return self.additions.clone();
        }
        let mut out = self.object_candidates.clone();
        for c in &self.additions {
            if !out.iter().any(|o| o.name == c.name) {
                out.push(c.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "detail", rename_all = "snake_case")]
pub enum ConsistencyVerdict {
    Accept,
    Retry(String),
    Abort(String),
}

/// What a stage produced.
#[derive(Debug, Clone, Copy)]
pub enum Produced<'a> {
    Plan(&'a ScenePlan),
    Image {
        before: &'a Image,
        after: &'a Image,
        mask: &'a MaskRaster,
    },
}

/// What the checker compares a stage output against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub canvas: CanvasSpec,
    /// Required object count, when the plan must match the enriched targets.
    pub object_count: Option<usize>,
    pub tolerance: u8,
}

/// Image-stage inspection; the default is the mechanical mask-change check.
pub trait ImageInspector: Send + Sync {
    fn inspect(
        &self,
        before: &Image,
        after: &Image,
        mask: &MaskRaster,
        tolerance: u8,
    ) -> ConsistencyVerdict;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MaskChangeInspector;

impl ImageInspector for MaskChangeInspector {
    fn inspect(
        &self,
        before: &Image,
        after: &Image,
        mask: &MaskRaster,
        tolerance: u8,
    ) -> ConsistencyVerdict {
        let report = match verify_composite(before, after, mask, tolerance) {
            Ok(r) => r,
            Err(e) => return ConsistencyVerdict::Abort(e.to_string()),
        };
        if report.changed_inside == 0.0 {
            ConsistencyVerdict::Retry(
                "region unchanged: the masked area still matches the previous image".into(),
            )
        } else if report.changed_outside > 0.0 {
            ConsistencyVerdict::Retry(format!(
                "{:.4} of the pixels outside the mask changed",
                report.changed_outside
            ))
        } else {
            ConsistencyVerdict::Accept
        }
    }
}

/// Checks a stage output with the default image inspector.
pub fn check_consistency(produced: Produced<'_>, expected: &Expectation) -> ConsistencyVerdict {
    check_with(produced, expected, &MaskChangeInspector)
}

pub fn check_with(
    produced: Produced<'_>,
    expected: &Expectation,
    inspector: &dyn ImageInspector,
) -> ConsistencyVerdict {
    match produced {
        Produced::Plan(plan) => {
            if !expected.canvas.is_valid() {
                return ConsistencyVerdict::Abort(format!(
                    "canvas {} is not usable",
                    expected.canvas
                ));
            }
            let report = validate_plan(plan, expected.canvas);
            if !report.is_valid() {
                return ConsistencyVerdict::Retry(format!(
                    "the plan has validation issues:\n{}",
                    report.summary()
                ));
            }
            if let Some(n) = expected.object_count {
                if plan.objects.len() != n {
                    return ConsistencyVerdict::Retry(format!(
                        "object count mismatch: expected {n} objects, found {}",
                        plan.objects.len()
                    ));
                }
            }
            if let Err(cycle) = order_objects(&plan.objects, expected.canvas) {
                return ConsistencyVerdict::Retry(format!(
                    "the relations are contradictory: {cycle}"
                ));
            }
            ConsistencyVerdict::Accept
        }
        Produced::Image {
            before,
            after,
            mask,
        } => inspector.inspect(before, after, mask, expected.tolerance),
    }
}

/// A planned layout and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: ScenePlan,
    pub retry_count: u32,
    /// Set when the declared order violated a relation and was recomputed.
    pub reordered: Option<Vec<String>>,
    pub rationale: String,
}

/// Progress reported by one step; the service turns these into events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub kind: String,
    pub payload: Value,
}

impl StepEvent {
    pub fn new(kind: impl Into<String>, payload: Value) -> Self {
        Self {
            kind: kind.into(),
            payload,
        }
    }
}

struct Rejection {
    feedback: String,
    report: Option<ValidationReport>,
}

impl Rejection {
    fn text(feedback: impl Into<String>) -> Self {
        Self {
            feedback: feedback.into(),
            report: None,
        }
    }
}

enum ConverseError {
    Backend(BackendError),
    Exhausted { attempts: u32, last: Rejection },
}

struct Conversation<T> {
    value: T,
    messages: Vec<Message>,
    rounds: u32,
    transcript: String,
}

/// Drives the planner and image backends for one session at a time.
pub struct Coordinator<'a> {
    pub config: &'a CoordinatorConfig,
    pub planner: &'a dyn PlannerBackend,
    pub images: &'a dyn ImageBackend,
    pub blobs: &'a dyn BlobStore,
    pub inspector: &'a dyn ImageInspector,
}

impl<'a> Coordinator<'a> {
    pub fn new(
        config: &'a CoordinatorConfig,
        planner: &'a dyn PlannerBackend,
        images: &'a dyn ImageBackend,
        blobs: &'a dyn BlobStore,
    ) -> Self {
        Self {
            config,
            planner,
            images,
            blobs,
            inspector: &MaskChangeInspector,
        }
    }

    fn request(&self, system: &str, messages: Vec<Message>) -> CompletionRequest {
        CompletionRequest {
            system: system.to_string(),
            messages,
            temperature: self.config.temperature,
        }
    }

    /// Asks, parses the structured tail, and re-prompts with the parse or
    /// validation feedback until a reply is accepted or retries run out.
    fn converse<T>(
        &self,
        system: &str,
        mut messages: Vec<Message>,
        mut accept: impl FnMut(&str) -> Result<T, Rejection>,
    ) -> Result<Conversation<T>, ConverseError> {
        let mut transcript = String::new();
        for attempt in 0..=self.config.max_retries {
            let reply = self
                .planner
                .complete(&self.request(system, messages.clone()))
                .map_err(ConverseError::Backend)?;
            if !transcript.is_empty() {
                transcript.push_str("\n\n");
            }
            transcript.push_str(&reply);
            let rejection = match structured_tail(&reply) {
                None => Rejection::text("the reply has no JSON block"),
                Some(tail) => match accept(tail) {
                    Ok(value) => {
                        messages.push(Message::assistant(reply));
                        return Ok(Conversation {
                            value,
                            messages,
                            rounds: attempt,
                            transcript,
                        });
                    }
                    Err(r) => r,
                },
            };
            if attempt == self.config.max_retries {
                return Err(ConverseError::Exhausted {
                    attempts: attempt + 1,
                    last: rejection,
                });
            }
            messages.push(Message::assistant(reply));
            messages.push(Message::user(format!(
                "Your reply could not be used: {}\nReply again and end with the corrected JSON block.",
                rejection.feedback
            )));
        }
        unreachable!("the loop returns on its last attempt")
    }

    // -----------------------------------------------------------------------
    // Planning
    // -----------------------------------------------------------------------

    pub fn assess_sufficiency(&self, prompt: &UserPrompt) -> Result<Sufficiency> {
        check_prompt(prompt)?;
        let request = self.request(
            &self.config.templates.sufficiency,
            vec![user_message(prompt)],
        );
        let reply = self.planner.complete(&request)?;
        Ok(parse_sufficiency(&reply))
    }

    pub fn enrich_prompt(&self, prompt: &UserPrompt) -> Result<EnrichedPrompt> {
        check_prompt(prompt)?;
        let malformed = |step: &str, e: ConverseError| match e {
            ConverseError::Backend(b) => CoordinatorError::Backend(b),
            ConverseError::Exhausted { attempts, last } => CoordinatorError::MalformedReply {
                step: step.to_string(),
                attempts,
                last_error: last.feedback,
            },
        };

        let identify = self
            .converse(
                &self.config.templates.identify,
                vec![user_message(prompt)],
                |tail| {
                    let doc = parse_enrichment(tail).map_err(|e| Rejection::text(e.to_string()))?;
                    match doc.background {
                        Some(bg) if !bg.description.trim().is_empty() => Ok((bg, doc.objects)),
                        _ => Err(Rejection::text(
                            "the JSON block needs a background with a description",
                        )),
                    }
                },
            )
            .map_err(|e| malformed("identify", e))?;

        let mut messages = identify.messages;
        messages.push(Message::user(self.config.templates.additions.clone()));
        let additions = self
            .converse(&self.config.templates.identify, messages, parse_additions)
            .map_err(|e| malformed("additions", e))?;

        let (background, object_candidates) = identify.value;
        Ok(EnrichedPrompt {
            background,
            object_candidates,
            additions: additions.value,
            rationale: format!("{}\n\n{}", identify.transcript, additions.transcript),
            retry_count: identify.rounds + additions.rounds,
        })
    }

    /// Places `targets` on the canvas. An empty target list leaves the object
    /// count to the planner.
    pub fn plan_layout(
        &self,
        enriched: &EnrichedPrompt,
        targets: &[Candidate],
        background_image: Option<&str>,
        canvas: CanvasSpec,
    ) -> Result<PlanOutcome> {
        let target_list: Vec<Value> = targets
            .iter()
            .map(|c| json!({"name": c.name, "description": c.description}))
            .collect();
        let text = format!(
            "Canvas: {canvas}\nBackground: {}\nTargets:\n{}",
            enriched.background.description,
            serde_json::to_string_pretty(&target_list).expect("values serialize"),
        );
        let mut message = Message::user(text);
        if let Some(r) = background_image {
            message = message.with_image(r);
        }
        let expected = Expectation {
            canvas,
            object_count: (!targets.is_empty()).then_some(targets.len()),
            tolerance: self.config.tolerance,
        };
        let conv = self
            .converse(&self.config.templates.layout, vec![message], |tail| {
                let mut plan = parse_plan(tail)
                    .map_err(|e| Rejection::text(format!("the plan could not be parsed: {e}")))?;
                plan.canvas = canvas;
                if plan.background.description.trim().is_empty() {
                    plan.background = enriched.background.clone();
                }
                match check_with(Produced::Plan(&plan), &expected, self.inspector) {
                    ConsistencyVerdict::Accept => Ok(plan),
                    ConsistencyVerdict::Retry(feedback) | ConsistencyVerdict::Abort(feedback) => {
                        Err(Rejection {
                            report: Some(validate_plan(&plan, canvas)),
                            feedback,
                        })
                    }
                }
            })
            .map_err(|e| match e {
                ConverseError::Backend(b) => CoordinatorError::Backend(b),
                ConverseError::Exhausted { attempts, last } => CoordinatorError::PlanRejected {
                    attempts,
                    feedback: last.feedback,
                    report: last.report,
                },
            })?;

        let mut plan = conv.value;
        let reordered = enforce_relation_order(&mut plan);
        Ok(PlanOutcome {
            plan,
            retry_count: conv.rounds,
            reordered,
            rationale: conv.transcript,
        })
    }

    // -----------------------------------------------------------------------
    // Session steps
    // -----------------------------------------------------------------------

    /// Runs the next step of a session: assess and enrich, then plan, then
    /// one pipeline job per call. Errors mark the session failed; a failed
    /// session resumes from where it stopped on the next call.
    pub fn step(&self, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        if let SessionStatus::Failed { resume, .. } = &state.status {
            let next = match resume {
                Phase::Planning => SessionStatus::Planning,
                Phase::Generating => SessionStatus::Generating,
            };
            state.status = next;
        }
        let phase = match state.status {
            SessionStatus::Planning => Phase::Planning,
            SessionStatus::Generating => Phase::Generating,
            _ => {
                return Ok(vec![StepEvent::new(
                    "warning",
                    json!({"message": format!("nothing to do in status {}", state.status.name())}),
                )])
            }
        };
        let outcome = match phase {
            Phase::Planning => self.planning_step(state),
            Phase::Generating => self.generating_step(state),
        };
        outcome.map_err(|e| {
            state.status = SessionStatus::Failed {
                reason: format!("{}: {e}", e.code()),
                resume: phase,
            };
            e
        })
    }

    fn planning_step(&self, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        let canvas = state.settings.canvas;
        if state.enriched.is_none() {
            let verdict = self.assess_sufficiency(&state.prompt)?;
            let mut events = vec![StepEvent::new("assessed", json!({ "verdict": verdict }))];
            match verdict {
                Sufficiency::Enrich => {
                    let enriched = self.enrich_prompt(&state.prompt)?;
                    state.rationale.push(RationaleEntry {
                        step: "enrich".into(),
                        text: enriched.rationale.clone(),
                    });
                    events.push(StepEvent::new(
                        "enriched",
                        json!({
                            "candidates": enriched.object_candidates.len(),
                            "additions": enriched.additions.len(),
                            "retry_count": enriched.retry_count,
                        }),
                    ));
                    state.enriched = Some(enriched);
                }
                Sufficiency::Skip => {
                    let (enriched, plan) = skip_enrichment(&state.prompt, canvas)?;
                    state.enriched = Some(enriched);
                    if let Some(plan) = plan {
                        events.push(self.accept_plan(state, plan, None)?);
                    }
                }
            }
            return Ok(events);
        }

        let enriched = state.enriched.as_ref().expect("checked above");
        let photo = state.prompt.attachments.first().map(String::as_str);
        let targets = enriched.foreground_targets(photo.is_some());
        let outcome = self.plan_layout(enriched, &targets, photo, canvas)?;
        state.rationale.push(RationaleEntry {
            step: "layout".into(),
            text: outcome.rationale.clone(),
        });
        if let Some(order) = &outcome.reordered {
            state.notes.push(format!(
                "declared generation order violated a relation; recomputed as {}",
                order.join(", ")
            ));
        }
        let retry_count = outcome.retry_count;
        let mut event = self.accept_plan(state, outcome.plan, outcome.reordered)?;
        event.payload["retry_count"] = json!(retry_count);
        Ok(vec![event])
    }

    fn accept_plan(
        &self,
        state: &mut SessionState,
        plan: ScenePlan,
        reordered: Option<Vec<String>>,
    ) -> Result<StepEvent> {
        let report = validate_plan(&plan, state.settings.canvas);
        if !report.is_valid() {
            return Err(CoordinatorError::PlanRejected {
                attempts: 0,
                feedback: report.summary(),
                report: Some(report),
            });
        }
        state.pending = std::iter::once(Job::Background)
            .chain(plan.objects_in_order().into_iter().map(|o| Job::Object {
                name: o.name.clone(),
            }))
            .collect();
        let event = StepEvent::new(
            "planned",
            json!({
                "objects": plan.objects_in_order().iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
                "reordered": reordered.is_some(),
            }),
        );
        state.plan = Some(plan);
        state
            .transition(SessionStatus::Generating)
            .map_err(CoordinatorError::Precondition)?;
        Ok(event)
    }

    fn generating_step(&self, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        let plan = state
            .plan
            .as_ref()
            .ok_or_else(|| CoordinatorError::Precondition("generating without a plan".into()))?;
        let report = validate_plan(plan, state.settings.canvas);
        if !report.is_valid() {
            return Err(CoordinatorError::PlanRejected {
                attempts: 0,
                feedback: report.summary(),
                report: Some(report),
            });
        }
        let mut events = Vec::new();
        if let Some(job) = state.pending.first().cloned() {
            let (stage, retries) = self.run_job(state, &job)?;
            state.pending.remove(0);
            events.push(StepEvent::new(
                "stage",
                json!({
                    "index": state.stages.len(),
                    "label": stage.label,
                    "image": stage.image,
                    "retries": retries,
                }),
            ));
            state.stages.push(stage);
        }
        if state.pending.is_empty() {
            let next = if state.settings.interactive {
                SessionStatus::AwaitingUser
            } else {
                SessionStatus::Complete
            };
            state
                .transition(next)
                .map_err(CoordinatorError::Precondition)?;
        }
        Ok(events)
    }

    fn seed(&self, state: &SessionState, attempt: u32) -> u64 {
        state
            .settings
            .base_seed
            .wrapping_add((state.stages.len() as u64) << 8)
            .wrapping_add(u64::from(attempt))
    }

    fn load_image(&self, blob: &str) -> Result<Image> {
        let bytes = self.blobs.get(blob)?;
        Image::from_png(&bytes)
            .map_err(|e| CoordinatorError::Backend(BackendError::Decoding(e.to_string())))
    }

    fn run_job(&self, state: &SessionState, job: &Job) -> Result<(Stage, u32)> {
        let plan = state.plan.as_ref().expect("checked by caller");
        let canvas = state.settings.canvas;
        match job {
            Job::Background => {
                let image = match state.prompt.attachments.first() {
                    Some(photo) => {
                        let img = self.load_image(photo)?;
                        if img.canvas() != canvas {
                            return Err(CoordinatorError::Precondition(format!(
                                "attached photo is {}, canvas is {canvas}",
                                img.canvas()
                            )));
                        }
                        img
                    }
                    None => self.images.generate(
                        &plan.background.generation_prompt(),
                        canvas,
                        self.seed(state, 0),
                    )?,
                };
                let blob = self.blobs.put(&image.to_png())?;
                Ok((
                    Stage {
                        label: "background".into(),
                        image: blob,
                        plan: plan.clone(),
                        mask: None,
                    },
                    0,
                ))
            }
            Job::Object { name } => {
                let obj = plan
                    .object(name)
                    .ok_or_else(|| CoordinatorError::UnknownObject(name.clone()))?;
                let region = enlarge_box(obj.bounding_box, canvas);
                let mask =
                    rasterize_mask(region, canvas).map_err(|e| CoordinatorError::StageFailed {
                        stage: name.clone(),
                        cause: e.to_string(),
                    })?;
                let reference = obj
                    .reference_image
                    .as_deref()
                    .map(|r| self.load_image(r))
                    .transpose()?;
                self.inpaint_stage(state, name.clone(), mask, obj.prompt.clone(), reference)
            }
            Job::Erase { mask, label } => {
                let raster = mask
                    .to_raster(canvas)
                    .map_err(CoordinatorError::InvalidEdit)?;
                self.inpaint_stage(
                    state,
                    label.clone(),
                    raster,
                    plan.background.generation_prompt(),
                    None,
                )
            }
        }
    }

    fn inpaint_stage(
        &self,
        state: &SessionState,
        label: String,
        mask: MaskRaster,
        prompt: String,
        reference: Option<Image>,
    ) -> Result<(Stage, u32)> {
        let composite = state.composite().ok_or(CoordinatorError::NoComposite)?;
        let before = self.load_image(&composite.image)?;
        let expected = Expectation {
            canvas: state.settings.canvas,
            object_count: None,
            tolerance: self.config.tolerance,
        };
        let mut last = String::new();
        let mut request = InpaintRequest {
            background: before,
            mask,
            reference,
            prompt,
            seed: 0,
        };
        for attempt in 0..=self.config.max_retries {
            request.seed = self.seed(state, attempt);
            let after = self.images.inpaint(&request)?;
            let verdict = check_with(
                Produced::Image {
                    before: &request.background,
                    after: &after,
                    mask: &request.mask,
                },
                &expected,
                self.inspector,
            );
            match verdict {
                ConsistencyVerdict::Accept => {
                    let image = self.blobs.put(&after.to_png())?;
                    let mask = self.blobs.put(&mask_to_png(&request.mask))?;
                    let stage = Stage {
                        label,
                        image,
                        plan: state.plan.clone().expect("checked by caller"),
                        mask: Some(mask),
                    };
                    return Ok((stage, attempt));
                }
                ConsistencyVerdict::Retry(feedback) => last = feedback,
                ConsistencyVerdict::Abort(reason) => {
                    return Err(CoordinatorError::StageFailed {
                        stage: label,
                        cause: reason,
                    })
                }
            }
        }
        Err(CoordinatorError::StageFailed {
            stage: label,
            cause: format!(
                "retry verdict after {} attempts: {last}",
                self.config.max_retries + 1
            ),
        })
    }

    /// Runs pipeline jobs until the session leaves `generating`.
    pub fn run_pipeline(&self, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        if state.status != SessionStatus::Generating {
            return Err(CoordinatorError::Precondition(format!(
                "pipeline needs status generating, found {}",
                state.status
            )));
        }
        let mut events = Vec::new();
        while state.status == SessionStatus::Generating {
            events.extend(self.step(state)?);
        }
        Ok(events)
    }

    /// Runs steps until the session completes, pauses for the user or fails.
    /// A failed session is resumed first.
    pub fn run_to_rest(&self, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        let mut events = Vec::new();
        while matches!(
            state.status,
            SessionStatus::Planning | SessionStatus::Generating | SessionStatus::Failed { .. }
        ) {
            events.extend(self.step(state)?);
        }
        Ok(events)
    }

    // -----------------------------------------------------------------------
    // Edits
    // -----------------------------------------------------------------------

    /// Records an edit and schedules the pipeline work it needs. The jobs run
    /// on subsequent steps; recorded stages are never touched.
    pub fn apply_edit(
        &self,
        state: &mut SessionState,
        edit: EditRequest,
    ) -> Result<Vec<StepEvent>> {
        if !state.status.accepts_edits() {
            return Err(CoordinatorError::Precondition(format!(
                "edits need status awaiting_user or complete, found {}",
                state.status
            )));
        }
        let composite = state
            .composite()
            .ok_or(CoordinatorError::NoComposite)?
            .image
            .clone();
        let mut plan = state
            .plan
            .clone()
            .ok_or_else(|| CoordinatorError::Precondition("session has no plan".into()))?;
        let canvas = state.settings.canvas;

        let (jobs, detail) = match &edit {
            EditRequest::RemoveRegion { mask } => {
                let raster = mask
                    .to_raster(canvas)
                    .map_err(CoordinatorError::InvalidEdit)?;
                let removed: Vec<String> = plan
                    .objects
                    .iter()
                    .filter(|o| covers(&raster, o))
                    .map(|o| o.name.clone())
                    .collect();
                plan.objects.retain(|o| !removed.contains(&o.name));
                renumber(&mut plan);
                let jobs = vec![Job::Erase {
                    mask: mask.clone(),
                    label: "remove region".into(),
                }];
                (jobs, json!({ "removed": removed }))
            }
            EditRequest::AddObject { draft, reference } => {
                if draft.prompt.trim().is_empty() {
                    return Err(CoordinatorError::InvalidEdit(
                        "the new object needs a prompt".into(),
                    ));
                }
                if draft.name.trim().is_empty() {
                    return Err(CoordinatorError::InvalidEdit(
                        "the new object needs a name".into(),
                    ));
                }
                if plan.object(&draft.name).is_some() {
                    return Err(CoordinatorError::InvalidEdit(format!(
                        "object {:?} already exists",
                        draft.name
                    )));
                }
                let text = format!(
                    "Current plan:\n{}\nNew object:\n{}",
                    serialize_plan(&plan),
                    serde_json::to_string_pretty(draft).expect("drafts serialize"),
                );
                let mut message = Message::user(text).with_image(&composite);
                if let Some(r) = reference {
                    message = message.with_image(r);
                }
                let order = plan.next_generation_order();
                let base = plan.clone();
                let conv = self
                    .converse(&self.config.templates.add_object, vec![message], |tail| {
                        let mut obj = first_object(tail)?;
                        obj.name = draft.name.clone();
                        obj.generation_order = order;
                        obj.reference_image = reference.clone();
                        let mut merged = base.clone();
                        merged.objects.push(obj);
                        self.accept_merged(merged, canvas)
                    })
                    .map_err(plan_rejected)?;
                state.rationale.push(RationaleEntry {
                    step: "add_object".into(),
                    text: conv.transcript,
                });
                plan = conv.value;
                let jobs = vec![Job::Object {
                    name: draft.name.clone(),
                }];
                (
                    jobs,
                    json!({ "added": draft.name, "generation_order": order }),
                )
            }
            EditRequest::ModifyObject { name, instruction } => {
                let old = plan
                    .object(name)
                    .cloned()
                    .ok_or_else(|| CoordinatorError::UnknownObject(name.clone()))?;
                let text = format!(
                    "Current plan:\n{}\nObject: {name}\nInstruction: {instruction}",
                    serialize_plan(&plan)
                );
                let message = Message::user(text).with_image(&composite);
                let base = plan.clone();
                let conv = self
                    .converse(
                        &self.config.templates.modify_object,
                        vec![message],
                        |tail| {
                            let mut obj = first_object(tail)?;
                            obj.name = old.name.clone();
                            obj.generation_order = old.generation_order;
                            obj.reference_image = old.reference_image.clone();
                            if obj.relations.is_empty() {
                                obj.relations = old.relations.clone();
                            }
                            let mut merged = base.clone();
                            *merged.object_mut(name).expect("present in base") = obj;
                            self.accept_merged(merged, canvas)
                        },
                    )
                    .map_err(plan_rejected)?;
                state.rationale.push(RationaleEntry {
                    step: "modify_object".into(),
                    text: conv.transcript,
                });
                plan = conv.value;
                let new_box = plan.object(name).expect("kept").bounding_box;
                let mut jobs = Vec::new();
                if new_box != old.bounding_box {
                    jobs.push(Job::Erase {
                        mask: MaskSpec::Rect(enlarge_box(old.bounding_box, canvas)),
                        label: format!("clear {name}"),
                    });
                }
                jobs.push(Job::Object { name: name.clone() });
                let detail = json!({
                    "modified": name,
                    "old_box": old.bounding_box,
                    "new_box": new_box,
                });
                (jobs, detail)
            }
        };

        state.plan = Some(plan);
        state.pending.extend(jobs);
        let kind = edit.kind();
        state.edits.push(edit);
        state
            .transition(SessionStatus::Generating)
            .map_err(CoordinatorError::Precondition)?;
        let mut payload = detail;
        payload["kind"] = json!(kind);
        Ok(vec![StepEvent::new("edit", payload)])
    }

    fn accept_merged(
        &self,
        mut merged: ScenePlan,
        canvas: CanvasSpec,
    ) -> Result<ScenePlan, Rejection> {
        merged.canvas = canvas;
        let expected = Expectation {
            canvas,
            object_count: None,
            tolerance: self.config.tolerance,
        };
        match check_with(Produced::Plan(&merged), &expected, self.inspector) {
            ConsistencyVerdict::Accept => Ok(merged),
            ConsistencyVerdict::Retry(feedback) | ConsistencyVerdict::Abort(feedback) => {
                Err(Rejection {
                    report: Some(validate_plan(&merged, canvas)),
                    feedback,
                })
            }
        }
    }
}

fn plan_rejected(e: ConverseError) -> CoordinatorError {
    match e {
        ConverseError::Backend(b) => CoordinatorError::Backend(b),
        ConverseError::Exhausted { attempts, last } => CoordinatorError::PlanRejected {
            attempts,
            feedback: last.feedback,
            report: last.report,
        },
    }
}

fn check_prompt(prompt: &UserPrompt) -> Result<()> {
    if prompt.is_valid() {
        Ok(())
    } else {
        Err(CoordinatorError::InvalidPrompt(
            "the prompt is empty".into(),
        ))
    }
}

fn user_message(prompt: &UserPrompt) -> Message {
    prompt
        .attachments
        .iter()
        .fold(Message::user(prompt.text.clone()), |m, r| m.with_image(r))
}

/// Reads the verdict from the reply's last non-empty line; anything
/// unrecognised means Enrich.
pub fn parse_sufficiency(reply: &str) -> Sufficiency {
    let last = reply
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("");
    let token = last
        .trim()
        .trim_start_matches("Verdict:")
        .trim()
        .trim_matches(|c: char| !c.is_ascii_alphanumeric());
    if token.eq_ignore_ascii_case("skip") {
        Sufficiency::Skip
    } else {
        Sufficiency::Enrich
    }
}

fn parse_additions(tail: &str) -> Result<Vec<Candidate>, Rejection> {
    let value: Value = serde_json::from_str(tail).map_err(|e| Rejection::text(e.to_string()))?;
    match value.get("suggested_additions") {
        Some(Value::Array(items)) if items.is_empty() => Ok(Vec::new()),
        Some(Value::Array(_)) => parse_enrichment(tail)
            .map(|d| d.suggested_additions)
            .map_err(|e| Rejection::text(e.to_string())),
        _ => Err(Rejection::text(
            "the JSON block needs a suggested_additions array",
        )),
    }
}

fn first_object(tail: &str) -> Result<ObjectSpec, Rejection> {
    let plan = parse_plan(tail)
        .map_err(|e| Rejection::text(format!("the object could not be parsed: {e}")))?;
    plan.objects
        .into_iter()
        .next()
        .ok_or_else(|| Rejection::text("the JSON block lists no object"))
}

/// The skip path: a prompt that carries a plan document is used as is;
/// otherwise the prompt itself describes the background.
fn skip_enrichment(
    prompt: &UserPrompt,
    canvas: CanvasSpec,
) -> Result<(EnrichedPrompt, Option<ScenePlan>)> {
    if let Some(mut plan) = structured_tail(&prompt.text).and_then(|t| parse_plan(t).ok()) {
        plan.canvas = canvas;
        let candidates = plan
            .objects_in_order()
            .into_iter()
            .map(|o| Candidate {
                name: o.name.clone(),
                description: o.prompt.clone(),
            })
            .collect();
        let enriched = EnrichedPrompt {
            background: plan.background.clone(),
            object_candidates: candidates,
            additions: Vec::new(),
            rationale: String::new(),
            retry_count: 0,
        };
        return Ok((enriched, Some(plan)));
    }
    let enriched = EnrichedPrompt {
        background: BackgroundSpec::new(prompt.text.trim()),
        object_candidates: Vec::new(),
        additions: Vec::new(),
        rationale: String::new(),
        retry_count: 0,
    };
    Ok((enriched, None))
}

/// Recomputes generation order when the declared one breaks a relation edge.
fn enforce_relation_order(plan: &mut ScenePlan) -> Option<Vec<String>> {
    let order_of = |name: &str| plan.object(name).map(|o| o.generation_order);
    let violated = plan.objects.iter().any(|o| {
        relation_edges(o).any(
            |(before, after)| match (order_of(before), order_of(after)) {
                (Some(b), Some(a)) => b >= a,
                _ => false,
            },
        )
    });
    if !violated {
        return None;
    }
    let order = order_objects(&plan.objects, plan.canvas).ok()?;
    for (i, name) in order.iter().enumerate() {
        plan.object_mut(name)
            .expect("ordered names exist")
            .generation_order = i as u32 + 1;
    }
    Some(order)
}

fn covers(mask: &MaskRaster, obj: &ObjectSpec) -> bool {
    let b = obj.bounding_box.clamp_to(mask.canvas());
    !b.is_empty()
        && (b.y_min..b.y_max).all(|y| (b.x_min..b.x_max).all(|x| mask.get(x as u32, y as u32)))
}

fn renumber(plan: &mut ScenePlan) {
    let names: Vec<String> = plan
        .objects_in_order()
        .into_iter()
        .map(|o| o.name.clone())
        .collect();
    for (i, name) in names.iter().enumerate() {
        plan.object_mut(name).expect("listed").generation_order = i as u32 + 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::MockImageBackend;
    use crate::layout::{Rect, RelationKind};
    use crate::planner::ScriptedPlanner;
    use crate::session::{MemoryBlobStore, SessionSettings};

    const IDENTIFY: &str = "Looking at it.\n```json\n{\"objects\": [{\"name\": \"cat\", \"description\": \"a cat\"}], \"background\": {\"description\": \"a garden\"}}\n```";
    const ADDITIONS: &str = "```json\n{\"suggested_additions\": [{\"name\": \"ball\", \"description\": \"a red ball\"}]}\n```";
    const LAYOUT: &str = r#"Placing them.
```json
{"objects": [
 {"type": "cat", "position": "center", "generation_order": 1, "prompt": "a tabby cat", "bounding_box": [10, 10, 30, 30]},
 {"type": "ball", "position": "lower right", "generation_order": 2, "prompt": "a red ball", "bounding_box": [40, 40, 60, 60]}
]}
```"#;

    fn canvas() -> CanvasSpec {
        CanvasSpec::new(64, 64)
    }

    fn run(planner: &ScriptedPlanner, state: &mut SessionState) -> Result<Vec<StepEvent>> {
        let config = CoordinatorConfig::default();
        let blobs = MemoryBlobStore::new();
        let c = Coordinator::new(&config, planner, &MockImageBackend, &blobs);
        c.run_to_rest(state)
    }

    #[test]
    fn sufficiency_token_parsing() {
        assert_eq!(parse_sufficiency("thinking...\nSKIP"), Sufficiency::Skip);
        assert_eq!(parse_sufficiency("Verdict: skip."), Sufficiency::Skip);
        assert_eq!(parse_sufficiency("ENRICH"), Sufficiency::Enrich);
        assert_eq!(parse_sufficiency("SKIP\nmaybe not"), Sufficiency::Enrich);
        assert_eq!(parse_sufficiency(""), Sufficiency::Enrich);
    }

    #[test]
    fn full_session_reaches_complete() {
        let planner = ScriptedPlanner::new(["ENRICH", IDENTIFY, ADDITIONS, LAYOUT]);
        let settings = SessionSettings {
            canvas: canvas(),
            ..Default::default()
        };
        let mut state = SessionState::new("s", UserPrompt::new("a cat playing"), settings);
        run(&planner, &mut state).unwrap();
        assert_eq!(state.status, SessionStatus::Complete);
        assert_eq!(state.stages.len(), 3);
        assert_eq!(state.stages[0].label, "background");
        assert_eq!(state.stages[2].label, "ball");
        assert_eq!(planner.remaining(), 0);
    }

    #[test]
    fn cardinality_mismatch_is_corrected() {
        let three = LAYOUT.replace(
            "]}\n```",
            ",\n {\"type\": \"dog\", \"generation_order\": 3, \"prompt\": \"a dog\", \"bounding_box\": [0, 0, 5, 5]}\n]}\n```",
        );
        let planner = ScriptedPlanner::new(["ENRICH", IDENTIFY, ADDITIONS, three.as_str(), LAYOUT]);
        let settings = SessionSettings {
            canvas: canvas(),
            ..Default::default()
        };
        let mut state = SessionState::new("s", UserPrompt::new("a cat"), settings);
        run(&planner, &mut state).unwrap();
        assert_eq!(state.plan.unwrap().objects.len(), 2);
    }

    #[test]
    fn relation_violation_reorders() {
        let mut plan = ScenePlan::new(BackgroundSpec::new("room"), canvas());
        plan.objects = vec![
            ObjectSpec::new("book", "a book", Rect::new(0, 0, 10, 10))
                .with_order(1)
                .with_relation(RelationKind::OnTopOf, "shelf"),
            ObjectSpec::new("shelf", "a shelf", Rect::new(0, 10, 30, 60)).with_order(2),
        ];
        let order = enforce_relation_order(&mut plan).unwrap();
        assert_eq!(order, ["shelf", "book"]);
        assert_eq!(plan.object("shelf").unwrap().generation_order, 1);
        assert!(enforce_relation_order(&mut plan).is_none());
    }

    #[test]
    fn consistency_flags_count_and_unchanged_region() {
        let plan = parse_plan(
            LAYOUT
                .split("```json")
                .nth(1)
                .unwrap()
                .trim_end_matches("```")
                .trim(),
        )
        .unwrap();
        let mut plan = plan;
        plan.background = BackgroundSpec::new("garden");
        plan.canvas = canvas();
        let exp = |n| Expectation {
            canvas: canvas(),
            object_count: n,
            tolerance: 0,
        };
        assert_eq!(
            check_consistency(Produced::Plan(&plan), &exp(Some(2))),
            ConsistencyVerdict::Accept
        );
        assert!(matches!(
            check_consistency(Produced::Plan(&plan), &exp(Some(3))),
            ConsistencyVerdict::Retry(m) if m.contains("object count mismatch")
        ));
        let img = Image::filled(4, 4, [1, 2, 3, 255]);
        let mask = rasterize_mask(Rect::new(0, 0, 2, 2), CanvasSpec::new(4, 4)).unwrap();
        let v = check_consistency(
            Produced::Image {
                before: &img,
                after: &img,
                mask: &mask,
            },
            &exp(None),
        );
        assert!(matches!(v, ConsistencyVerdict::Retry(m) if m.contains("region unchanged")));
    }

    #[test]
    fn empty_prompt_is_rejected_without_calls() {
        let planner = ScriptedPlanner::new(["ENRICH"]);
        let config = CoordinatorConfig::default();
        let blobs = MemoryBlobStore::new();
        let c = Coordinator::new(&config, &planner, &MockImageBackend, &blobs);
        assert!(matches!(
            c.assess_sufficiency(&UserPrompt::new("   ")),
            Err(CoordinatorError::InvalidPrompt(_))
        ));
        assert_eq!(planner.remaining(), 1);
    }

    #[test]
    fn failure_is_resumable() {
        let planner = ScriptedPlanner::new(["ENRICH", IDENTIFY]);
        let settings = SessionSettings {
            canvas: canvas(),
            ..Default::default()
        };
        let mut state = SessionState::new("s", UserPrompt::new("a cat"), settings);
        let err = run(&planner, &mut state).unwrap_err();
        assert_eq!(err.code(), "NoTranscriptEntry");
        assert!(matches!(
            state.status,
            SessionStatus::Failed {
                resume: Phase::Planning,
                ..
            }
        ));
        assert!(state.enriched.is_none());
    }
}
