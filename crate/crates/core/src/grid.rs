//! Small helpers shared by every stage that works on the latent H×W grid.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A dense H×W map of reals, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

/// A self-attention head projected to one channel and min-max normalized to `[0, 1]`.
///
/// A constant projection yields the all-zero map.
pub type GrayscaleMap = ScalarMap;

impl ScalarMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            grid_h * grid_w,
            "map size does not match grid"
        );
        Self {
            grid_h,
            grid_w,
            values,
        }
    }

    pub fn zeros(grid_h: usize, grid_w: usize) -> Self {
        Self::new(grid_h, grid_w, vec![0.0; grid_h * grid_w])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_w + col]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rescales to `[0, 1]` in place; a constant map becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        min_max_normalize(&mut self.values);
    }
}

pub(crate) fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// 4-connected components of the pixels for which `member` holds.
///
/// Components are returned in raster order of their top-left pixel and each
/// pixel list is sorted ascending.
pub fn components4(
    grid_h: usize,
    grid_w: usize,
    member: impl Fn(usize) -> bool,
) -> Vec<Vec<usize>> {
    let n = grid_h * grid_w;
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            for q in neighbors4(p, grid_h, grid_w) {
                if !seen[q] && member(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Indices of the up-to-four axis neighbours of pixel `p`.
pub fn neighbors4(p: usize, grid_h: usize, grid_w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / grid_w, p % grid_w);
    let up = (r > 0).then(|| p - grid_w);
    let down = (r + 1 < grid_h).then(|| p + grid_w);
    let left = (c > 0).then(|| p - 1);
    let right = (c + 1 < grid_w).then(|| p + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Mean (row, col) of a pixel set.
pub fn centroid(pixels: &[usize], grid_w: usize) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (sr, sc) = pixels.iter().fold((0u64, 0u64), |(sr, sc), &p| {
        (sr + (p / grid_w) as u64, sc + (p % grid_w) as u64)
    });
    (sr as f64 / n, sc as f64 / n)
}

/// Writes an 8-bit binary PGM of a `[0, 1]` map.
pub fn encode_pgm(map: &ScalarMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.grid_w, map.grid_h).into_bytes();
    out.extend(
        map.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
