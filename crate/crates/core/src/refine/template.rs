use serde::{Deserialize, Serialize};

use crate::layout::Layout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateOrigin {
    /// Shape of an existing region; `reference` holds that region's pixels.
    CopiedRegion {
        reference: Vec<usize>,
    },
    Circle {
        radius: usize,
    },
}

/// Pixel offsets (row, col) around an integer anchor cell close to the shape's centroid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub offsets: Vec<(i64, i64)>,
    pub origin: TemplateOrigin,
}

impl Template {
    /// Discrete disk: every offset with `row² + col² <= radius²`.
    pub fn circle(radius: usize) -> Self {
        let r = radius as i64;
        let mut offsets = Vec::new();
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc <= r * r {
                    offsets.push((dr, dc));
                }
            }
        }
        Self {
            offsets,
            origin: TemplateOrigin::Circle { radius },
        }
    }

    /// Offsets of `pixels` relative to their rounded centroid.
    pub fn from_region(pixels: &[usize], grid_w: usize) -> Self {
        let n = pixels.len() as f64;
        let (sr, sc) = pixels.iter().fold((0usize, 0usize), |(r, c), &p| {
            (r + p / grid_w, c + p % grid_w)
        });
        let (ar, ac) = (
            (sr as f64 / n).round() as i64,
            (sc as f64 / n).round() as i64,
        );
        let offsets = pixels
            .iter()
            .map(|&p| ((p / grid_w) as i64 - ar, (p % grid_w) as i64 - ac))
            .collect();
        Self {
            offsets,
            origin: TemplateOrigin::CopiedRegion {
                reference: pixels.to_vec(),
            },
        }
    }

    pub fn area(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_copied(&self) -> bool {
        matches!(self.origin, TemplateOrigin::CopiedRegion { .. })
    }

    /// Row and column extents of the offsets: (min_r, max_r, min_c, max_c).
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        self.offsets
            .iter()
            .fold((i64::MAX, i64::MIN, i64::MAX, i64::MIN), |b, &(r, c)| {
                (b.0.min(r), b.1.max(r), b.2.min(c), b.3.max(c))
            })
    }

    /// Absolute pixels when anchored at `center`, or `None` if any falls outside the grid.
    pub fn pixels_at(
        &self,
        center: (usize, usize),
        grid_h: usize,
        grid_w: usize,
    ) -> Option<Vec<usize>> {
        self.offsets
            .iter()
            .map(|&(dr, dc)| {
                let r = center.0 as i64 + dr;
                let c = center.1 as i64 + dc;
                (r >= 0 && c >= 0 && r < grid_h as i64 && c < grid_w as i64)
                    .then(|| r as usize * grid_w + c as usize)
            })
            .collect()
    }
}

/// Smallest region of `label` in `frame` (ties: lowest top-left pixel), if any.
pub(crate) fn smallest_region(layout: &Layout, label: u16, frame: usize) -> Option<Vec<usize>> {
    // regions come out ordered by first pixel, so min_by_key keeps the earliest on ties
    layout
        .regions(label, frame)
        .into_iter()
        .min_by_key(|r| r.len())
}

/// Copy of the smallest existing region, or a disk of radius `radius` when the
/// category has no region in this frame.
pub fn make_template(layout: &Layout, label: u16, frame: usize, radius: usize) -> Template {
    match smallest_region(layout, label, frame) {
        Some(region) => Template::from_region(&region, layout.grid_w),
        None => Template::circle(radius),
    }
}

/// `round(min(grid_h, grid_w) / 8)`.
pub fn default_radius(grid_h: usize, grid_w: usize) -> usize {
    (grid_h.min(grid_w) as f64 / 8.0).round() as usize
}
