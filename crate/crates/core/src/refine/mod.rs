//! Instance-level layout edits until every frame holds the prompted count.

mod place;
mod template;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use place::{
    best_placement, category_center, place_instance, placement_cost, remove_smallest, Placement,
    PlacementCost,
};
pub use template::{default_radius, make_template, Template, TemplateOrigin};

use crate::grid::centroid;
use crate::layout::{Layout, LayoutError, BACKGROUND};
use crate::prompt::CountSpec;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("label {label} has no region in frame {frame}")]
    NoRegion { label: u16, frame: usize },
    #[error("template anchored at ({row}, {col}) leaves the grid")]
    OutOfBounds { row: usize, col: usize },
    #[error("no admissible placement for label {label} in frame {frame}")]
    NoValidPlacement { label: u16, frame: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("edit log: {0}")]
    EditLog(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Remove,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub frame: usize,
    pub category: String,
    pub op: EditOp,
    /// Anchor cell for additions, centroid for removals, as (row, col).
    pub center: [f64; 2],
    pub area: usize,
    /// Template used by an addition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateOrigin>,
    pub pixels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<PlacementCost>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub edits: Vec<Edit>,
}

impl EditLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edit log serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, RefineError> {
        serde_json::from_str(json).map_err(|e| RefineError::EditLog(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RefineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RefineError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Pixels added to and removed from one category in one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaMask {
    pub added: Vec<usize>,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLayout {
    pub layout: Layout,
    pub edits: Vec<Edit>,
    /// `[frame][category]`, categories in label order.
    pub deltas: Vec<Vec<DeltaMask>>,
}

pub const DELTA_ADD: u16 = 1;
pub const DELTA_REMOVE: u16 = 2;

impl RefinedLayout {
    /// Rebuilds deltas for a refined layout and the edits that produced it.
    pub fn from_parts(layout: Layout, edits: Vec<Edit>) -> Result<Self, RefineError> {
        let deltas = compute_deltas(&layout, &edits)?;
        Ok(Self {
            layout,
            edits,
            deltas,
        })
    }

    pub fn edit_log(&self) -> EditLog {
        EditLog {
            edits: self.edits.clone(),
        }
    }

    /// Delta masks as a layout with one frame per (frame, category) pair,
    /// frame-major; label 1 marks added pixels and label 2 removed ones.
    pub fn delta_layout(&self) -> Layout {
        let cats = self.layout.labels.len();
        let mut out = Layout::new(
            self.layout.frame_count() * cats,
            self.layout.grid_h,
            self.layout.grid_w,
        );
        out.register("add", None, None);
        out.register("remove", None, None);
        for (f, per_cat) in self.deltas.iter().enumerate() {
            for (c, delta) in per_cat.iter().enumerate() {
                let grid = &mut out.frames[f * cats + c];
                for &p in &delta.added {
                    grid[p] = DELTA_ADD;
                }
                for &p in &delta.removed {
                    grid[p] = DELTA_REMOVE;
                }
            }
        }
        out
    }
}

/// Added pixels that still carry the category and removed pixels that are
/// still background in the final layout.
pub fn compute_deltas(layout: &Layout, edits: &[Edit]) -> Result<Vec<Vec<DeltaMask>>, RefineError> {
    let labels: Vec<u16> = layout.labels.keys().copied().collect();
    let mut deltas = vec![vec![DeltaMask::default(); labels.len()]; layout.frame_count()];
    for e in edits {
        let label = layout.label_of(&e.category).ok_or_else(|| {
            RefineError::EditLog(format!("category {:?} is not in the layout", e.category))
        })?;
        let grid = layout.frames.get(e.frame).ok_or_else(|| {
            RefineError::EditLog(format!("frame {} is not in the layout", e.frame))
        })?;
        if let Some(&p) = e.pixels.iter().find(|&&p| p >= grid.len()) {
            return Err(RefineError::EditLog(format!(
                "pixel {p} is outside the grid"
            )));
        }
        let slot = &mut deltas[e.frame][labels.iter().position(|&l| l == label).unwrap()];
        match e.op {
            EditOp::Add => slot
                .added
                .extend(e.pixels.iter().filter(|&&p| grid[p] == label)),
            EditOp::Remove => slot
                .removed
                .extend(e.pixels.iter().filter(|&&p| grid[p] == BACKGROUND)),
        }
    }
    for per_cat in deltas.iter_mut() {
        for d in per_cat.iter_mut() {
            d.added.sort_unstable();
            d.added.dedup();
            d.removed.sort_unstable();
            d.removed.dedup();
        }
    }
    Ok(deltas)
}

fn to_center(c: (usize, usize)) -> [f64; 2] {
    [c.0 as f64, c.1 as f64]
}

/// Anchors the new instance, falling back from the copied template to
/// successively smaller disks when it has no admissible center.
fn insert_one(
    layout: Layout,
    label: u16,
    frame: usize,
    radius: usize,
    prev: Option<(f64, f64)>,
    lambda: f64,
    stride: usize,
) -> Result<(Layout, Template, Placement), RefineError> {
    let first = make_template(&layout, label, frame, radius);
    let mut fallbacks = Vec::new();
    if first.is_copied() {
        fallbacks.push(Template::circle(radius));
    }
    fallbacks.extend((0..radius).rev().map(Template::circle));
    for template in std::iter::once(first).chain(fallbacks) {
        if let Some(p) = best_placement(&layout, label, frame, &template, prev, lambda, stride)? {
            let mut layout = layout;
            for &px in &p.pixels {
                layout.frames[frame][px] = label;
            }
            return Ok((layout, template, p));
        }
    }
    Err(RefineError::NoValidPlacement { label, frame })
}

/// Removes smallest regions or inserts template instances, category by
/// category in spec order and frame by frame, until each frame's count equals
/// the target. The j-th insertion of a frame is pulled toward the j-th
/// insertion of the previous frame.
pub fn refine_to_count(
    mut layout: Layout,
    spec: &CountSpec,
    lambda: f64,
    radius: usize,
    stride: usize,
) -> Result<RefinedLayout, RefineError> {
    if layout.frame_count() == 0 {
        return Err(RefineError::InvalidParameter("layout has no frames".into()));
    }
    if stride == 0 {
        return Err(RefineError::InvalidParameter(
            "stride must be at least 1".into(),
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(RefineError::InvalidParameter(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let mut edits = Vec::new();
    for entry in &spec.entries {
        // keep a token index already bound to the model's tokens
        let label = layout.register(&entry.canonical, None, Some(entry.k));
        let cat = layout.labels.get_mut(&label).unwrap();
        cat.target = Some(entry.k);
        cat.token_index = cat.token_index.or(Some(entry.token_index));
        let k = entry.k as usize;
        let mut prev_centers: Vec<(f64, f64)> = Vec::new();
        for frame in 0..layout.frame_count() {
            let mut m = layout.count(label, frame);
            while m > k {
                let (next, removed) = remove_smallest(layout, label, frame)?;
                layout = next;
                let (r, c) = centroid(&removed, layout.grid_w);
                edits.push(Edit {
                    frame,
                    category: entry.canonical.clone(),
                    op: EditOp::Remove,
                    center: [r, c],
                    area: removed.len(),
                    template: None,
                    pixels: removed,
                    cost: None,
                });
                m -= 1;
            }
            let mut centers = Vec::new();
            while m < k {
                let prev = prev_centers.get(centers.len()).copied();
                let (next, template, placement) =
                    insert_one(layout, label, frame, radius, prev, lambda, stride)?;
                layout = next;
                centers.push((placement.center.0 as f64, placement.center.1 as f64));
                edits.push(Edit {
                    frame,
                    category: entry.canonical.clone(),
                    op: EditOp::Add,
                    center: to_center(placement.center),
                    area: placement.pixels.len(),
                    template: Some(template.origin),
                    pixels: placement.pixels,
                    cost: Some(placement.cost),
                });
                m += 1;
            }
            prev_centers = centers;
        }
    }
    RefinedLayout::from_parts(layout, edits)
}
