//! Deterministic spatial logic: region grid, generation ordering, box
//! enlargement, mask rasterization and token masks.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{CanvasSpec, ObjectSpec, Rect, RelationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Row {
    Upper,
    Center,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Col {
    Left,
    Center,
    Right,
}

impl Row {
    fn index(self) -> i64 {
        self as i64
    }
}

impl Col {
    fn index(self) -> i64 {
        self as i64
    }
}

/// One cell of the 3x3 region grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub row: Row,
    pub col: Col,
}

impl GridCell {
    pub const fn new(row: Row, col: Col) -> Self {
        Self { row, col }
    }

    pub fn all() -> impl Iterator<Item = GridCell> {
        [Row::Upper, Row::Center, Row::Lower]
            .into_iter()
            .flat_map(|row| {
                [Col::Left, Col::Center, Col::Right]
                    .into_iter()
                    .map(move |col| GridCell { row, col })
            })
    }

    /// Column `i` spans `[i*floor(W/3), (i+1)*floor(W/3))`; the last column
    /// and row absorb the remainder.
    pub fn rect(self, canvas: CanvasSpec) -> Rect {
        let span = |i: i64, extent: u32| {
            let step = extent as i64 / 3;
            let start = i * step;
            let end = if i == 2 {
                extent as i64
            } else {
                (i + 1) * step
            };
            (start, end)
        };
        let (x0, x1) = span(self.col.index(), canvas.width);
        let (y0, y1) = span(self.row.index(), canvas.height);
        Rect::new(x0, y0, x1, y1)
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let col = match self.col {
            Col::Left => "left",
            Col::Center => "center",
            Col::Right => "right",
        };
        match self.row {
            Row::Center if self.col == Col::Center => f.write_str("center"),
            Row::Center => write!(f, "center-{col}"),
            Row::Upper => write!(f, "upper {col}"),
            Row::Lower => write!(f, "lower {col}"),
        }
    }
}

/// A named region of the canvas.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RegionName {
    Cell(GridCell),
    /// Straddles two distinct cells.
    Between(GridCell, GridCell),
    /// "A to B": stretches across two regions.
    Span(Box<RegionName>, Box<RegionName>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognised region {text:?}: {reason}")]
pub struct RegionParseError {
    pub text: String,
    pub reason: String,
}

fn row_word(w: &str) -> Option<Row> {
    match w {
        "upper" | "top" => Some(Row::Upper),
        "center" | "centre" | "middle" => Some(Row::Center),
        "lower" | "bottom" => Some(Row::Lower),
        _ => None,
    }
}

fn col_word(w: &str) -> Option<Col> {
    match w {
        "left" => Some(Col::Left),
        "center" | "centre" | "middle" => Some(Col::Center),
        "right" => Some(Col::Right),
        _ => None,
    }
}

/// Parses a single grid phrase into a region (a cell, or a Between when the
/// phrase names a half-step such as "lower center-right").
fn parse_cell_phrase(phrase: &str) -> Option<RegionName> {
    let normalized = phrase.replace('-', " ");
    let words: Vec<&str> = normalized.split_whitespace().collect();
    match words.as_slice() {
        [w] => {
            if let Some(col) = col_word(w).filter(|c| *c != Col::Center) {
                Some(RegionName::Cell(GridCell::new(Row::Center, col)))
            } else {
                row_word(w).map(|row| RegionName::Cell(GridCell::new(row, Col::Center)))
            }
        }
        [r, c] => Some(RegionName::Cell(GridCell::new(row_word(r)?, col_word(c)?))),
        // "lower center-right": between the row's center cell and its side cell
        [r, "center" | "centre" | "middle", side] => {
            let row = row_word(r)?;
            let side = col_word(side).filter(|c| *c != Col::Center)?;
            Some(RegionName::Between(
                GridCell::new(row, Col::Center),
                GridCell::new(row, side),
            ))
        }
        _ => None,
    }
}

fn parse_region(text: &str) -> Result<RegionName, String> {
    let t = text.trim().to_ascii_lowercase();
    if t.is_empty() {
        return Err("empty region".into());
    }
    if let Some((from, to)) = t.split_once(" to ") {
        return Ok(RegionName::Span(
            Box::new(parse_region(from)?),
            Box::new(parse_region(to)?),
        ));
    }
    if let Some(rest) = t.strip_prefix("between ") {
        let (a, b) = rest
            .split_once(" and ")
            .ok_or_else(|| "expected \"between A and B\"".to_string())?;
        let a = parse_cell_phrase(a).ok_or_else(|| format!("unknown grid cell {a:?}"))?;
        let b = parse_cell_phrase(b).ok_or_else(|| format!("unknown grid cell {b:?}"))?;
        return match (a, b) {
            (RegionName::Cell(x), RegionName::Cell(y)) if x == y => {
                Err("between needs two distinct cells".into())
            }
            (RegionName::Cell(x), RegionName::Cell(y)) => Ok(RegionName::Between(x, y)),
            (a, b) => Ok(RegionName::Span(Box::new(a), Box::new(b))),
        };
    }
    parse_cell_phrase(&t).ok_or_else(|| "not a grid cell phrase".into())
}

impl FromStr for RegionName {
    type Err = RegionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_region(s).map_err(|reason| RegionParseError {
            text: s.to_string(),
            reason,
        })
    }
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionName::Cell(c) => write!(f, "{c}"),
            RegionName::Between(a, b) => write!(f, "between {a} and {b}"),
            RegionName::Span(a, b) => write!(f, "{a} to {b}"),
        }
    }
}

/// Pixel rectangle covered by a region on `canvas`.
pub fn resolve_region(region: &RegionName, canvas: CanvasSpec) -> Rect {
    match region {
        RegionName::Cell(c) => c.rect(canvas),
        RegionName::Between(a, b) => a.rect(canvas).union(&b.rect(canvas)),
        RegionName::Span(a, b) => resolve_region(a, canvas).union(&resolve_region(b, canvas)),
    }
}

// ---------------------------------------------------------------------------
// Ordering
// ---------------------------------------------------------------------------

/// Depth proxy: a lower bottom edge means the object is closer to the viewer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthKey {
    pub bottom_edge: i64,
    pub area: i64,
}

impl DepthKey {
    pub fn of(rect: &Rect) -> Self {
        Self {
            bottom_edge: rect.y_max,
            area: rect.area(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("relation cycle: {}", cycle.join(" -> "))]
pub struct CycleError {
    /// Object names along the cycle; first and last are the same.
    pub cycle: Vec<String>,
}

/// Edges `(before, after)` implied by one object's relations.
pub fn relation_edges(obj: &ObjectSpec) -> impl Iterator<Item = (&str, &str)> {
    obj.relations.iter().filter_map(move |rel| match rel.kind {
        RelationKind::OnTopOf | RelationKind::Inside | RelationKind::InFrontOf => {
            Some((rel.target.as_str(), obj.name.as_str()))
        }
        RelationKind::Behind => Some((obj.name.as_str(), rel.target.as_str())),
        RelationKind::Beside => None,
    })
}

#[derive(PartialEq, Eq)]
struct Ready<'a> {
    key: DepthKey,
    name: &'a str,
}

impl Ord for Ready<'_> {
    // BinaryHeap is a max-heap; "greatest" is the object to emit next.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .bottom_edge
            .cmp(&self.key.bottom_edge)
            .then_with(|| self.key.area.cmp(&other.key.area))
            .then_with(|| other.name.cmp(self.name))
    }
}

impl PartialOrd for Ready<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Far-to-near generation order respecting support relations.
///
/// Relation edges always win. Among the remaining choices the object with
/// the smallest bottom edge goes first, then the larger area, then the name.
/// Relations that point at unknown objects are ignored here; validation
/// reports them.
pub fn order_objects(
    objects: &[ObjectSpec],
    canvas: CanvasSpec,
) -> Result<Vec<String>, CycleError> {
    let index: HashMap<&str, usize> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.name.as_str(), i))
        .collect();
    let n = objects.len();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut indegree = vec![0usize; n];
    for obj in objects {
        for (before, after) in relation_edges(obj) {
            if let (Some(&b), Some(&a)) = (index.get(before), index.get(after)) {
                if b != a && succ[b].insert(a) {
                    indegree[a] += 1;
                }
            }
        }
    }

    let key = |i: usize| DepthKey::of(&objects[i].bounding_box.clamp_to(canvas));
    let mut heap: BinaryHeap<Ready> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| Ready {
            key: key(i),
            name: &objects[i].name,
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    while let Some(Ready { name, .. }) = heap.pop() {
        let i = index[name];
        out.push(name.to_string());
        for &j in &succ[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                heap.push(Ready {
                    key: key(j),
                    name: &objects[j].name,
                });
            }
        }
    }

    if out.len() < n {
        return Err(CycleError {
            cycle: find_cycle(objects, &succ, &indegree),
        });
    }
    Ok(out)
}

fn find_cycle(objects: &[ObjectSpec], succ: &[BTreeSet<usize>], indegree: &[usize]) -> Vec<String> {
    // A node left with positive indegree still has a predecessor that is also
    // left, so walking predecessors must revisit a node.
    let remaining: Vec<bool> = indegree.iter().map(|d| *d > 0).collect();
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); succ.len()];
    for (i, targets) in succ.iter().enumerate() {
        for &j in targets {
            pred[j].push(i);
        }
    }
    let start = remaining
        .iter()
        .position(|r| *r)
        .expect("cycle implies a remaining node");
    let mut path = vec![start];
    let mut seen = HashMap::from([(start, 0usize)]);
    let mut cur = start;
    loop {
        let prev = *pred[cur]
            .iter()
            .find(|j| remaining[**j])
            .expect("remaining node keeps a remaining predecessor");
        if let Some(&pos) = seen.get(&prev) {
            // path[pos..] walks backwards along edges; flip it to edge order
            let mut cycle: Vec<String> = path[pos..]
                .iter()
                .rev()
                .map(|i| objects[*i].name.clone())
                .collect();
            cycle.insert(0, objects[prev].name.clone());
            return cycle;
        }
        seen.insert(prev, path.len());
        path.push(prev);
        cur = prev;
    }
}

// ---------------------------------------------------------------------------
// Box post-processing and masks
// ---------------------------------------------------------------------------

/// Grows a box by 10% of its width on each side and 15% of its height at the
/// bottom, then clamps to the canvas. Rounding is half away from zero.
pub fn enlarge_box(rect: Rect, canvas: CanvasSpec) -> Rect {
    let w = rect.width().max(0);
    let h = rect.height().max(0);
    // round(w / 10) and round(3h / 20) in exact integer arithmetic
    let side = (w + 5) / 10;
    let bottom = (3 * h + 10) / 20;
    Rect::new(
        rect.x_min - side,
        rect.y_min,
        rect.x_max + side,
        rect.y_max + bottom,
    )
    .clamp_to(canvas)
}

/// Row-major binary mask: 1 = fill, 0 = keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpatialError {
    #[error("box {0} does not overlap the canvas")]
    EmptyMask(Rect),
    #[error("canvas {canvas} is not divisible by patch size {patch}")]
    PatchMisaligned { canvas: CanvasSpec, patch: u32 },
    #[error("mask data has {actual} values, expected {expected}")]
    MaskSize { expected: usize, actual: usize },
    #[error("mask values must be 0 or 1")]
    MaskValue,
}

impl MaskRaster {
    pub fn empty(canvas: CanvasSpec) -> Self {
        Self {
            width: canvas.width,
            height: canvas.height,
            data: vec![0; canvas.pixel_count()],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<u8>) -> Result<Self, SpatialError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(SpatialError::MaskSize {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| *v > 1) {
            return Err(SpatialError::MaskValue);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn canvas(&self) -> CanvasSpec {
        CanvasSpec::new(self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] == 1
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.popcount() == 0
    }

    /// Sets every pixel of `rect` (clamped) to 1.
    pub fn fill_rect(&mut self, rect: Rect) {
        let r = rect.clamp_to(self.canvas());
        if r.is_empty() {
            return;
        }
        for y in r.y_min..r.y_max {
            let row = y as usize * self.width as usize;
            self.data[row + r.x_min as usize..row + r.x_max as usize].fill(1);
        }
    }

    /// Smallest rectangle containing every set pixel.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let mut acc: Option<Rect> = None;
        for (i, v) in self.data.iter().enumerate() {
            if *v == 1 {
                let x = (i % self.width as usize) as i64;
                let y = (i / self.width as usize) as i64;
                let px = Rect::new(x, y, x + 1, y + 1);
                acc = Some(acc.map_or(px, |a| a.union(&px)));
            }
        }
        acc
    }
}

pub fn rasterize_mask(rect: Rect, canvas: CanvasSpec) -> Result<MaskRaster, SpatialError> {
    if rect.clamp_to(canvas).is_empty() {
        return Err(SpatialError::EmptyMask(rect));
    }
    let mut mask = MaskRaster::empty(canvas);
    mask.fill_rect(rect);
    Ok(mask)
}

/// Patch indices (row-major over the patch grid) whose overlap with the box
/// is at least half the patch area.
pub fn box_to_token_mask(
    rect: Rect,
    canvas: CanvasSpec,
    patch: u32,
) -> Result<BTreeSet<usize>, SpatialError> {
    if patch == 0 || !canvas.width.is_multiple_of(patch) || !canvas.height.is_multiple_of(patch) {
        return Err(SpatialError::PatchMisaligned { canvas, patch });
    }
    let cols = canvas.width / patch;
    let rows = canvas.height / patch;
    let p = patch as i64;
    let mut out = BTreeSet::new();
    for row in 0..rows {
        for col in 0..cols {
            let cell = Rect::new(
                col as i64 * p,
                row as i64 * p,
                (col as i64 + 1) * p,
                (row as i64 + 1) * p,
            );
            if 2 * cell.intersect(&rect).area() >= p * p {
                out.insert((row * cols + col) as usize);
            }
        }
    }
    Ok(out)
}
