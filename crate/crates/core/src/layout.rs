//! Scene-plan documents: parsing, validation and canonical serialization.
//!
//! Parsing is lenient. A document that is well-formed JSON with the required
//! fields present becomes a [`ScenePlan`] even if its contents are
//! semantically wrong (overlapping orders, boxes off the canvas, dangling
//! relations). [`validate_plan`] then reports every problem at once so the
//! coordinator can turn the report into corrective feedback for the planner.
//!
//! Field names produced by language models drift between replies. The
//! [`ALIASES`] table lists every accepted spelling; the canonical form written
//! by [`serialize_plan`] always uses the first one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::spatial::RegionName;

/// Canvas used when a document does not declare one.
pub const DEFAULT_CANVAS: CanvasSpec = CanvasSpec {
    width: 512,
    height: 512,
};

/// Accepted spellings per canonical field, canonical name first.
///
/// `type` is listed for both `name` and `type` on purpose: the planner often
/// only sends `type`, which then doubles as the object name.
pub const ALIASES: &[(&str, &[&str])] = &[
    (
        "objects",
        &[
            "objects",
            "additional_objects",
            "additional_object",
            "suggested_additions",
            "object_placements",
        ],
    ),
    ("name", &["name", "type", "object"]),
    ("type", &["type", "object_type"]),
    ("position", &["position", "region", "suitable_regions"]),
    ("generation_order", &["generation_order", "order"]),
    ("bounding_box", &["bounding_box", "bbox", "box"]),
];

fn aliases_for(field: &str) -> &'static [&'static str] {
    ALIASES
        .iter()
        .find(|(canonical, _)| *canonical == field)
        .map(|(_, names)| *names)
        .unwrap_or(&[])
}

/// Axis-aligned pixel rectangle, half-open: `[x_min, x_max) x [y_min, y_max)`.
///
/// Origin is the top-left corner, x grows right and y grows down. Coordinates
/// are signed so that parsed-but-invalid boxes survive until validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct Rect {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl Rect {
    pub const fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn full(canvas: CanvasSpec) -> Self {
        Self::new(0, 0, canvas.width as i64, canvas.height as i64)
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    /// Area in pixels; zero for degenerate or inverted boxes.
    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            self.width() * self.height()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.x_min >= self.x_max || self.y_min >= self.y_max
    }

    /// `0 <= x_min < x_max` and `0 <= y_min < y_max`.
    pub fn is_well_formed(&self) -> bool {
        self.x_min >= 0 && self.y_min >= 0 && !self.is_empty()
    }

    pub fn within(&self, canvas: CanvasSpec) -> bool {
        self.x_min >= 0
            && self.y_min >= 0
            && self.x_max <= canvas.width as i64
            && self.y_max <= canvas.height as i64
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Intersection; may be empty.
    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
    }

    /// Bounding rectangle of both.
    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }

    pub fn clamp_to(&self, canvas: CanvasSpec) -> Rect {
        self.intersect(&Rect::full(canvas))
    }
}

impl From<[i64; 4]> for Rect {
    fn from(v: [i64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [i64; 4] {
    fn from(r: Rect) -> Self {
        [r.x_min, r.y_min, r.x_max, r.y_max]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: u32,
    pub height: u32,
}

impl CanvasSpec {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for CanvasSpec {
    fn default() -> Self {
        DEFAULT_CANVAS
    }
}

impl fmt::Display for CanvasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for CanvasSpec {
    type Err = String;

    /// Parses `WxH`, e.g. `512x512`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("canvas must look like WxH, got {s:?}"))?;
        let width: u32 = w.trim().parse().map_err(|e| format!("canvas width: {e}"))?;
        let height: u32 = h
            .trim()
            .parse()
            .map_err(|e| format!("canvas height: {e}"))?;
        let canvas = CanvasSpec { width, height };
        if !canvas.is_valid() {
            return Err(format!("canvas must be non-empty, got {s:?}"));
        }
        Ok(canvas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    OnTopOf,
    Inside,
    Beside,
    Behind,
    InFrontOf,
}

impl RelationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelationKind::OnTopOf => "on_top_of",
            RelationKind::Inside => "inside",
            RelationKind::Beside => "beside",
            RelationKind::Behind => "behind",
            RelationKind::InFrontOf => "in_front_of",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(
            match s
                .trim()
                .to_ascii_lowercase()
                .replace([' ', '-'], "_")
                .as_str()
            {
                "on_top_of" | "on" => RelationKind::OnTopOf,
                "inside" | "in" => RelationKind::Inside,
                "beside" | "next_to" => RelationKind::Beside,
                "behind" => RelationKind::Behind,
                "in_front_of" => RelationKind::InFrontOf,
                _ => return None,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    pub kind: RelationKind,
    /// Name of another object in the same plan.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackgroundSpec {
    pub description: String,
    pub included_elements: Vec<String>,
    pub extra: BTreeMap<String, Value>,
}

impl BackgroundSpec {
    pub fn new(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            ..Default::default()
        }
    }

    /// Text handed to the image backend for the background stage.
    pub fn generation_prompt(&self) -> String {
        if self.included_elements.is_empty() {
            self.description.clone()
        } else {
            format!(
                "{} Included elements: {}.",
                self.description,
                self.included_elements.join(", ")
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    pub object_type: String,
    pub prompt: String,
    /// Region text exactly as written by the planner; see [`ObjectSpec::region`].
    pub position: String,
    /// 1-based; 0 means "not assigned yet".
    pub generation_order: u32,
    pub bounding_box: Rect,
    pub relations: Vec<Relation>,
    /// Optional reference image (an image ref) for image-guided inpainting.
    pub reference_image: Option<String>,
    pub extra: BTreeMap<String, Value>,
}

impl ObjectSpec {
    pub fn new(name: impl Into<String>, prompt: impl Into<String>, bounding_box: Rect) -> Self {
        let name = name.into();
        Self {
            object_type: name.clone(),
            name,
            prompt: prompt.into(),
            position: String::new(),
            generation_order: 0,
            bounding_box,
            relations: Vec::new(),
            reference_image: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_order(mut self, order: u32) -> Self {
        self.generation_order = order;
        self
    }

    pub fn with_position(mut self, position: impl Into<String>) -> Self {
        self.position = position.into();
        self
    }

    pub fn with_relation(mut self, kind: RelationKind, target: impl Into<String>) -> Self {
        self.relations.push(Relation {
            kind,
            target: target.into(),
        });
        self
    }

    /// Parsed region, if the position text is non-empty and recognised.
    pub fn region(&self) -> Option<Result<RegionName, crate::spatial::RegionParseError>> {
        if self.position.trim().is_empty() {
            None
        } else {
            Some(self.position.parse())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub background: BackgroundSpec,
    pub objects: Vec<ObjectSpec>,
    pub canvas: CanvasSpec,
    pub style_notes: Option<String>,
    pub extra: BTreeMap<String, Value>,
}

impl ScenePlan {
    pub fn new(background: BackgroundSpec, canvas: CanvasSpec) -> Self {
        Self {
            background,
            objects: Vec::new(),
            canvas,
            style_notes: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn object(&self, name: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn object_mut(&mut self, name: &str) -> Option<&mut ObjectSpec> {
        self.objects.iter_mut().find(|o| o.name == name)
    }

    /// Objects sorted by generation order, ties by name.
    pub fn objects_in_order(&self) -> Vec<&ObjectSpec> {
        let mut objs: Vec<&ObjectSpec> = self.objects.iter().collect();
        objs.sort_by(|a, b| {
            a.generation_order
                .cmp(&b.generation_order)
                .then_with(|| a.name.cmp(&b.name))
        });
        objs
    }

    pub fn next_generation_order(&self) -> u32 {
        self.objects
            .iter()
            .map(|o| o.generation_order)
            .max()
            .unwrap_or(0)
            + 1
    }

    pub fn to_value(&self) -> Value {
        plan_to_value(self)
    }

    pub fn from_value(value: &Value) -> Result<Self, PlanError> {
        plan_from_value(value)
    }
}

impl Serialize for ScenePlan {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ScenePlan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        ScenePlan::from_value(&value).map_err(serde::de::Error::custom)
    }
}

impl Serialize for BackgroundSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        background_to_value(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BackgroundSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        parse_background(&value, "background").map_err(serde::de::Error::custom)
    }
}

impl Serialize for ObjectSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        object_to_value(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ObjectSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        parse_object(&value, "object")
            .map(|(obj, _)| obj)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

impl PlanError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        PlanError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    fn syntax(err: serde_json::Error) -> Self {
        PlanError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Path to the offending element, `$` for the document root.
    pub fn path(&self) -> Option<&str> {
        match self {
            PlanError::Syntax { .. } => None,
            PlanError::Schema { path, .. } => Some(path),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parses a plan document.
pub fn parse_plan(document: &str) -> Result<ScenePlan, PlanError> {
    let value: Value = serde_json::from_str(document).map_err(PlanError::syntax)?;
    plan_from_value(&value)
}

fn join(path: &str, key: &str) -> String {
    if path == "$" {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Removes the first alias of `field` present in `map` and returns it.
fn take_field(map: &mut Map<String, Value>, field: &str) -> Option<(&'static str, Value)> {
    aliases_for(field)
        .iter()
        .find_map(|name| map.remove(*name).map(|v| (*name, v)))
}

fn expect_str(value: &Value, path: &str) -> Result<String, PlanError> {
    value
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| PlanError::schema(path, format!("expected a string, found {}", kind(value))))
}

fn kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn expect_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, PlanError> {
    value.as_object().ok_or_else(|| {
        PlanError::schema(path, format!("expected an object, found {}", kind(value)))
    })
}

fn expect_string_list(value: &Value, path: &str) -> Result<Vec<String>, PlanError> {
    let items = value.as_array().ok_or_else(|| {
        PlanError::schema(path, format!("expected an array, found {}", kind(value)))
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| expect_str(v, &format!("{path}[{i}]")))
        .collect()
}

fn plan_from_value(value: &Value) -> Result<ScenePlan, PlanError> {
    let mut map = expect_object(value, "$")?.clone();

    let background = match map.remove("background") {
        None | Some(Value::Null) => BackgroundSpec::default(),
        Some(v) => parse_background(&v, "background")?,
    };

    let canvas = match map.remove("canvas") {
        None | Some(Value::Null) => DEFAULT_CANVAS,
        Some(v) => parse_canvas(&v, "canvas")?,
    };

    let mut style_notes = match map.remove("style_notes") {
        None | Some(Value::Null) => None,
        Some(v) => Some(expect_str(&v, "style_notes")?),
    };

    let (objects_key, objects_value) = take_field(&mut map, "objects")
        .ok_or_else(|| PlanError::schema("objects", "required field is missing"))?;
    let items = objects_value.as_array().ok_or_else(|| {
        PlanError::schema(
            objects_key,
            format!("expected an array, found {}", kind(&objects_value)),
        )
    })?;
    let mut objects = Vec::with_capacity(items.len());
    let mut extra_regions = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let (obj, rest) = parse_object(item, &format!("objects[{i}]"))?;
        if !rest.is_empty() {
            extra_regions.push(format!("{}: also suitable: {}", obj.name, rest.join("; ")));
        }
        objects.push(obj);
    }
    if !extra_regions.is_empty() {
        let joined = extra_regions.join("\n");
        style_notes = Some(match style_notes {
            Some(s) if !s.is_empty() => format!("{s}\n{joined}"),
            _ => joined,
        });
    }

    Ok(ScenePlan {
        background,
        objects,
        canvas,
        style_notes,
        extra: map.into_iter().collect(),
    })
}

pub(crate) fn parse_background(value: &Value, path: &str) -> Result<BackgroundSpec, PlanError> {
    if let Some(s) = value.as_str() {
        return Ok(BackgroundSpec::new(s));
    }
    let mut map = expect_object(value, path)?.clone();
    let description = match map.remove("description") {
        None | Some(Value::Null) => String::new(),
        Some(v) => expect_str(&v, &join(path, "description"))?,
    };
    let included_elements = match map.remove("included_elements") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => expect_string_list(&v, &join(path, "included_elements"))?,
    };
    Ok(BackgroundSpec {
        description,
        included_elements,
        extra: map.into_iter().collect(),
    })
}

fn parse_canvas(value: &Value, path: &str) -> Result<CanvasSpec, PlanError> {
    let map = expect_object(value, path)?;
    let dim = |key: &str| -> Result<u32, PlanError> {
        let p = join(path, key);
        let v = map
            .get(key)
            .ok_or_else(|| PlanError::schema(&p, "required field is missing"))?;
        v.as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| PlanError::schema(&p, "expected a non-negative integer"))
    };
    Ok(CanvasSpec {
        width: dim("width")?,
        height: dim("height")?,
    })
}

fn parse_rect(value: &Value, path: &str) -> Result<Rect, PlanError> {
    let items = value.as_array().ok_or_else(|| {
        PlanError::schema(
            path,
            format!(
                "expected [x_min, y_min, x_max, y_max], found {}",
                kind(value)
            ),
        )
    })?;
    if items.len() != 4 {
        return Err(PlanError::schema(
            path,
            format!("expected 4 coordinates, found {}", items.len()),
        ));
    }
    let mut coords = [0i64; 4];
    for (i, item) in items.iter().enumerate() {
        coords[i] = item.as_i64().ok_or_else(|| {
            PlanError::schema(
                format!("{path}[{i}]"),
                "expected an integer pixel coordinate",
            )
        })?;
    }
    Ok(Rect::from(coords))
}

/// Returns the object plus any extra regions from a multi-region list.
fn parse_object(value: &Value, path: &str) -> Result<(ObjectSpec, Vec<String>), PlanError> {
    let mut map = expect_object(value, path)?.clone();

    // `type` can serve as both name and type; read it before consuming aliases.
    let type_value = aliases_for("type")
        .iter()
        .find_map(|k| map.get(*k).cloned().map(|v| (*k, v)));

    let name = match take_field(&mut map, "name") {
        Some((key, v)) => expect_str(&v, &join(path, key))?,
        None => {
            return Err(PlanError::schema(
                join(path, "name"),
                "required field is missing",
            ))
        }
    };
    let object_type = match type_value {
        Some((key, v)) => {
            map.remove(key);
            expect_str(&v, &join(path, key))?
        }
        None => name.clone(),
    };

    let prompt = match map.remove("prompt") {
        Some(v) => expect_str(&v, &join(path, "prompt"))?,
        None => {
            return Err(PlanError::schema(
                join(path, "prompt"),
                "required field is missing",
            ))
        }
    };

    let mut rest = Vec::new();
    let position = match take_field(&mut map, "position") {
        None | Some((_, Value::Null)) => String::new(),
        Some((key, Value::Array(items))) => {
            let p = join(path, key);
            let mut regions = expect_string_list(&Value::Array(items), &p)?.into_iter();
            let first = regions.next().unwrap_or_default();
            rest.extend(regions);
            first
        }
        Some((key, v)) => expect_str(&v, &join(path, key))?,
    };

    let generation_order = match take_field(&mut map, "generation_order") {
        None | Some((_, Value::Null)) => 0,
        Some((key, v)) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| PlanError::schema(join(path, key), "expected a non-negative integer"))?,
    };

    let bounding_box = match take_field(&mut map, "bounding_box") {
        Some((key, v)) => parse_rect(&v, &join(path, key))?,
        None => {
            return Err(PlanError::schema(
                join(path, "bounding_box"),
                "required field is missing",
            ))
        }
    };

    let relations = match map.remove("relations") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => parse_relations(&v, &join(path, "relations"))?,
    };

    let reference_image = match map.remove("reference_image") {
        None | Some(Value::Null) => None,
        Some(v) => Some(expect_str(&v, &join(path, "reference_image"))?),
    };

    Ok((
        ObjectSpec {
            name,
            object_type,
            prompt,
            position,
            generation_order,
            bounding_box,
            relations,
            reference_image,
            extra: map.into_iter().collect(),
        },
        rest,
    ))
}

fn parse_relations(value: &Value, path: &str) -> Result<Vec<Relation>, PlanError> {
    let items = value.as_array().ok_or_else(|| {
        PlanError::schema(path, format!("expected an array, found {}", kind(value)))
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let p = format!("{path}[{i}]");
            let map = expect_object(item, &p)?;
            let kind_text = map
                .get("kind")
                .ok_or_else(|| PlanError::schema(join(&p, "kind"), "required field is missing"))
                .and_then(|v| expect_str(v, &join(&p, "kind")))?;
            let kind = RelationKind::parse(&kind_text).ok_or_else(|| {
                PlanError::schema(
                    join(&p, "kind"),
                    format!("unknown relation kind {kind_text:?}"),
                )
            })?;
            let target = map
                .get("target")
                .ok_or_else(|| PlanError::schema(join(&p, "target"), "required field is missing"))
                .and_then(|v| expect_str(v, &join(&p, "target")))?;
            Ok(Relation { kind, target })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn sorted_object(entries: BTreeMap<String, Value>) -> Value {
    // Built from a BTreeMap so key order is sorted even when serde_json keeps
    // insertion order.
    Value::Object(entries.into_iter().collect())
}

fn background_to_value(bg: &BackgroundSpec) -> Value {
    let mut m = bg.extra.clone();
    m.insert("description".into(), Value::String(bg.description.clone()));
    m.insert(
        "included_elements".into(),
        Value::Array(
            bg.included_elements
                .iter()
                .cloned()
                .map(Value::String)
                .collect(),
        ),
    );
    sorted_object(m)
}

fn object_to_value(obj: &ObjectSpec) -> Value {
    let mut m = obj.extra.clone();
    m.insert("name".into(), Value::String(obj.name.clone()));
    m.insert("type".into(), Value::String(obj.object_type.clone()));
    m.insert("prompt".into(), Value::String(obj.prompt.clone()));
    m.insert("position".into(), Value::String(obj.position.clone()));
    m.insert("generation_order".into(), Value::from(obj.generation_order));
    let coords: [i64; 4] = obj.bounding_box.into();
    m.insert(
        "bounding_box".into(),
        Value::Array(coords.iter().map(|c| Value::from(*c)).collect()),
    );
    if !obj.relations.is_empty() {
        let rels = obj
            .relations
            .iter()
            .map(|r| {
                let mut rm = BTreeMap::new();
                rm.insert("kind".to_string(), Value::String(r.kind.as_str().into()));
                rm.insert("target".to_string(), Value::String(r.target.clone()));
                sorted_object(rm)
            })
            .collect();
        m.insert("relations".into(), Value::Array(rels));
    }
    if let Some(r) = &obj.reference_image {
        m.insert("reference_image".into(), Value::String(r.clone()));
    }
    sorted_object(m)
}

fn plan_to_value(plan: &ScenePlan) -> Value {
    let mut m = plan.extra.clone();
    m.insert("background".into(), background_to_value(&plan.background));
    let mut canvas = BTreeMap::new();
    canvas.insert("height".to_string(), Value::from(plan.canvas.height));
    canvas.insert("width".to_string(), Value::from(plan.canvas.width));
    m.insert("canvas".into(), sorted_object(canvas));
    m.insert(
        "objects".into(),
        Value::Array(
            plan.objects_in_order()
                .into_iter()
                .map(object_to_value)
                .collect(),
        ),
    );
    if let Some(notes) = &plan.style_notes {
        m.insert("style_notes".into(), Value::String(notes.clone()));
    }
    sorted_object(m)
}

/// Canonical document: objects by generation order, sorted keys, two-space
/// indentation, trailing newline.
pub fn serialize_plan(plan: &ScenePlan) -> String {
    let mut out =
        serde_json::to_string_pretty(&plan_to_value(plan)).expect("plan values always serialize");
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    InvalidCanvas,
    EmptyBackground,
    EmptyName,
    DuplicateName,
    EmptyPrompt,
    InvalidBox,
    OutOfBounds,
    OrderNotPermutation,
    DanglingRelation,
    SelfRelation,
    UnknownRegion,
}

impl IssueCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueCode::InvalidCanvas => "INVALID_CANVAS",
            IssueCode::EmptyBackground => "EMPTY_BACKGROUND",
            IssueCode::EmptyName => "EMPTY_NAME",
            IssueCode::DuplicateName => "DUPLICATE_NAME",
            IssueCode::EmptyPrompt => "EMPTY_PROMPT",
            IssueCode::InvalidBox => "INVALID_BOX",
            IssueCode::OutOfBounds => "OUT_OF_BOUNDS",
            IssueCode::OrderNotPermutation => "ORDER_NOT_PERMUTATION",
            IssueCode::DanglingRelation => "DANGLING_RELATION",
            IssueCode::SelfRelation => "SELF_RELATION",
            IssueCode::UnknownRegion => "UNKNOWN_REGION",
        }
    }
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    /// Object name, or `"plan"` for plan-level issues.
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(issues: Vec<Issue>) -> Self {
        let verdict = if issues.is_empty() {
            Verdict::Valid
        } else {
            Verdict::Invalid
        };
        Self { verdict, issues }
    }

    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    /// One line per issue, suitable as corrective feedback.
    pub fn summary(&self) -> String {
        self.issues
            .iter()
            .map(|i| format!("- {} ({}): {}", i.code, i.subject, i.message))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

const PLAN_SUBJECT: &str = "plan";

/// Checks every plan invariant against `canvas` and reports all violations.
pub fn validate_plan(plan: &ScenePlan, canvas: CanvasSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |code, subject: &str, message: String| {
        issues.push(Issue {
            code,
            subject: subject.to_string(),
            message,
        })
    };

    if !canvas.is_valid() {
        push(
            IssueCode::InvalidCanvas,
            PLAN_SUBJECT,
            format!("canvas {canvas} has a zero dimension"),
        );
    }
    if plan.background.description.trim().is_empty() {
        push(
            IssueCode::EmptyBackground,
            PLAN_SUBJECT,
            "background description is empty".into(),
        );
    }

    let mut name_counts: HashMap<&str, usize> = HashMap::new();
    for obj in &plan.objects {
        *name_counts.entry(obj.name.as_str()).or_default() += 1;
    }
    let names: BTreeSet<&str> = name_counts.keys().copied().collect();

    for obj in &plan.objects {
        let subject = obj.name.as_str();
        if obj.name.trim().is_empty() {
            push(
                IssueCode::EmptyName,
                PLAN_SUBJECT,
                "object with an empty name".into(),
            );
        }
        if obj.prompt.trim().is_empty() {
            push(IssueCode::EmptyPrompt, subject, "prompt is empty".into());
        }
        let b = obj.bounding_box;
        if !b.is_well_formed() {
            push(
                IssueCode::InvalidBox,
                subject,
                format!("bounding box {b} must satisfy 0 <= x_min < x_max and 0 <= y_min < y_max"),
            );
        }
        if !b.within(canvas) {
            push(
                IssueCode::OutOfBounds,
                subject,
                format!("bounding box {b} exceeds the {canvas} canvas"),
            );
        }
        if let Some(Err(e)) = obj.region() {
            push(IssueCode::UnknownRegion, subject, e.to_string());
        }
        for rel in &obj.relations {
            if rel.target == obj.name {
                push(
                    IssueCode::SelfRelation,
                    subject,
                    format!("relation {} targets the object itself", rel.kind.as_str()),
                );
            } else if !names.contains(rel.target.as_str()) {
                push(
                    IssueCode::DanglingRelation,
                    subject,
                    format!(
                        "relation {} targets unknown object {:?}",
                        rel.kind.as_str(),
                        rel.target
                    ),
                );
            }
        }
    }

    for (name, count) in name_counts
        .iter()
        .filter(|(_, c)| **c > 1)
        .collect::<BTreeMap<_, _>>()
    {
        push(
            IssueCode::DuplicateName,
            name,
            format!("name used by {count} objects"),
        );
    }

    let n = plan.objects.len() as u32;
    let orders: Vec<u32> = plan.objects.iter().map(|o| o.generation_order).collect();
    let distinct: BTreeSet<u32> = orders.iter().copied().collect();
    let expected: BTreeSet<u32> = (1..=n).collect();
    if distinct != expected || orders.len() != distinct.len() {
        let mut sorted = orders.clone();
        sorted.sort_unstable();
        push(
            IssueCode::OrderNotPermutation,
            PLAN_SUBJECT,
            format!("generation orders {sorted:?} are not a permutation of 1..={n}"),
        );
    }

    ValidationReport::from_issues(issues)
}

// ---------------------------------------------------------------------------
// Enrichment documents
// ---------------------------------------------------------------------------

/// A candidate foreground object named during prompt enrichment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

/// The structured part of an enrichment reply: background plus candidates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnrichmentDocument {
    pub background: Option<BackgroundSpec>,
    pub objects: Vec<Candidate>,
    pub suggested_additions: Vec<Candidate>,
}

fn parse_candidates(value: &Value, path: &str) -> Result<Vec<Candidate>, PlanError> {
    let items = value.as_array().ok_or_else(|| {
        PlanError::schema(path, format!("expected an array, found {}", kind(value)))
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let p = format!("{path}[{i}]");
            let map = expect_object(item, &p)?;
            let name = ["name", "object", "type"]
                .iter()
                .find_map(|k| map.get(*k))
                .ok_or_else(|| PlanError::schema(join(&p, "name"), "required field is missing"))
                .and_then(|v| expect_str(v, &join(&p, "name")))?;
            let description = match map.get("description") {
                None | Some(Value::Null) => String::new(),
                Some(v) => expect_str(v, &join(&p, "description"))?,
            };
            Ok(Candidate { name, description })
        })
        .collect()
}

/// Parses an enrichment document (`objects` with name/description, optional
/// `background`, optional `suggested_additions`).
pub fn parse_enrichment(document: &str) -> Result<EnrichmentDocument, PlanError> {
    let value: Value = serde_json::from_str(document).map_err(PlanError::syntax)?;
    let map = expect_object(&value, "$")?;
    let background = match map.get("background") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_background(v, "background")?),
    };
    let objects = match map.get("objects") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => parse_candidates(v, "objects")?,
    };
    let suggested_additions = match map.get("suggested_additions") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => parse_candidates(v, "suggested_additions")?,
    };
    if background.is_none() && objects.is_empty() && suggested_additions.is_empty() {
        return Err(PlanError::schema(
            "$",
            "expected at least one of background, objects, suggested_additions",
        ));
    }
    Ok(EnrichmentDocument {
        background,
        objects,
        suggested_additions,
    })
}
