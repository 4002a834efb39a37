//! Countable per-frame label layouts built from a self-attention scaffold and a
//! per-noun cross-attention focus mask.

mod build;
mod focus;
mod nlay;
mod segment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use build::{construct_layout, overlap_score};
pub use focus::{
    build_focus_mask, dbscan, FocusMask, DEFAULT_EPS, DEFAULT_MIN_PTS, DEFAULT_PEAK_RATIO,
};
pub use nlay::{decode_layout, encode_layout, read_layout, write_layout, NLAY_MAGIC};
pub use segment::{segment_regions, MeanShiftParams, RegionSet};

use crate::grid::components4;

/// Label reserved for background pixels.
pub const BACKGROUND: u16 = 0;

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("label {0} is not registered")]
    UnknownLabel(u16),
    #[error("frame {frame} out of range ({frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("region is empty")]
    EmptyRegion,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported layout version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed layout file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    /// Column of the category's noun in the cross-attention token list.
    pub token_index: Option<usize>,
    pub target: Option<u32>,
}

/// Per-frame H×W label grids. Label 0 is background; every other label in use
/// is registered in `labels`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: Vec<Vec<u16>>,
    pub labels: BTreeMap<u16, Category>,
    /// Overlap score of the region that claimed each pixel during construction.
    owner_score: Vec<Vec<f64>>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.frames == other.frames
            && self.labels == other.labels
    }
}

impl Layout {
    pub fn new(frames: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            frames: vec![vec![BACKGROUND; grid_h * grid_w]; frames],
            labels: BTreeMap::new(),
            owner_score: Vec::new(),
        }
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Registers a category (or refreshes its token/target) and returns its label.
    pub fn register(&mut self, name: &str, token_index: Option<usize>, target: Option<u32>) -> u16 {
        if let Some(label) = self.label_of(name) {
            let cat = self.labels.get_mut(&label).unwrap();
            cat.token_index = token_index.or(cat.token_index);
            cat.target = target.or(cat.target);
            return label;
        }
        let label = self.labels.keys().next_back().map_or(1, |l| l + 1);
        self.labels.insert(
            label,
            Category {
                name: name.to_string(),
                token_index,
                target,
            },
        );
        label
    }

    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.labels
            .iter()
            .find(|(_, c)| c.name == name)
            .map(|(&l, _)| l)
    }

    pub fn category(&self, label: u16) -> Option<&Category> {
        self.labels.get(&label)
    }

    pub(crate) fn check(&self, label: u16, frame: usize) -> Result<(), LayoutError> {
        if !self.labels.contains_key(&label) {
            return Err(LayoutError::UnknownLabel(label));
        }
        if frame >= self.frames.len() {
            return Err(LayoutError::FrameOutOfRange {
                frame,
                frames: self.frames.len(),
            });
        }
        Ok(())
    }

    /// 4-connected regions carrying `label`, ordered by their top-left pixel.
    pub fn regions(&self, label: u16, frame: usize) -> Vec<Vec<usize>> {
        let grid = &self.frames[frame];
        components4(self.grid_h, self.grid_w, |p| grid[p] == label)
    }

    pub fn count(&self, label: u16, frame: usize) -> usize {
        self.regions(label, frame).len()
    }

    /// Instance counts as `[frame][category]`, categories in label order.
    pub fn counts(&self) -> Vec<Vec<usize>> {
        (0..self.frames.len())
            .map(|f| self.labels.keys().map(|&l| self.count(l, f)).collect())
            .collect()
    }

    pub(crate) fn owner_score(&self, frame: usize, p: usize) -> f64 {
        self.owner_score.get(frame).map_or(f64::INFINITY, |s| s[p])
    }

    pub(crate) fn set_owner_score(&mut self, frame: usize, p: usize, score: f64) {
        if self.owner_score.is_empty() {
            self.owner_score = vec![vec![f64::INFINITY; self.positions()]; self.frames.len()];
        }
        self.owner_score[frame][p] = score;
    }
}

/// Number of 4-connected regions labeled `label` in `frame`.
pub fn count_instances(layout: &Layout, label: u16, frame: usize) -> Result<usize, LayoutError> {
    layout.check(label, frame)?;
    Ok(layout.count(label, frame))
}
