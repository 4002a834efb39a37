//! Focus mask: thresholded, density-clustered support of a cross-attention map.

use serde::{Deserialize, Serialize};

use crate::grid::ScalarMap;

use super::LayoutError;

pub const DEFAULT_PEAK_RATIO: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 2.0;
pub const DEFAULT_MIN_PTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub mask: Vec<bool>,
    pub cluster_count: usize,
}

impl FocusMask {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            mask: vec![false; grid_h * grid_w],
            cluster_count: 0,
        }
    }

    /// A mask over every position, used when no cross-attention is available.
    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            mask: vec![true; grid_h * grid_w],
            cluster_count: 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

/// DBSCAN over 2-D points. `min_pts` counts the point itself.
/// Returns a cluster id per point, `None` for noise; ids follow input order.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = points
        .iter()
        .map(|a| {
            points
                .iter()
                .enumerate()
                .filter(|(_, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) <= eps2)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= min_pts).collect();

    let mut labels = vec![None; points.len()];
    let mut next = 0;
    for start in 0..points.len() {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        labels[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Keeps positions at or above `peak_ratio · max`, clusters the survivors by
/// position and drops DBSCAN noise.
pub fn build_focus_mask(
    map: &ScalarMap,
    peak_ratio: f64,
    eps: f64,
    min_pts: usize,
) -> Result<FocusMask, LayoutError> {
    if !(peak_ratio > 0.0 && peak_ratio < 1.0) {
        return Err(LayoutError::InvalidParameter(format!(
            "peak_ratio must lie in (0, 1), got {peak_ratio}"
        )));
    }
    if !(eps > 0.0) {
        return Err(LayoutError::InvalidParameter(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (h, w) = (map.grid_h, map.grid_w);
    let peak = map.max();
    if !(peak > 0.0) {
        return Ok(FocusMask::empty(h, w));
    }
    let cut = peak_ratio * peak;
    let survivors: Vec<usize> = (0..map.len()).filter(|&p| map.values[p] >= cut).collect();
    let points: Vec<(f64, f64)> = survivors
        .iter()
        .map(|&p| ((p / w) as f64, (p % w) as f64))
        .collect();
    let labels = dbscan(&points, eps, min_pts);

    let mut mask = FocusMask::empty(h, w);
    for (&p, l) in survivors.iter().zip(&labels) {
        if let Some(id) = l {
            mask.mask[p] = true;
            mask.cluster_count = mask.cluster_count.max(id + 1);
        }
    }
    Ok(mask)
}
