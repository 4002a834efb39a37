//! Mean-shift partition of a grayscale head map into contiguous regions.

use serde::{Deserialize, Serialize};

use crate::grid::{neighbors4, GrayscaleMap};

use super::LayoutError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    /// Kernel width in grid cells.
    pub bandwidth: f64,
    /// Scale applied to intensity before it joins (row, col).
    pub intensity_weight: f64,
    /// Components smaller than this are dropped.
    pub min_region: usize,
    pub max_iter: usize,
}

impl MeanShiftParams {
    /// Bandwidth `max(h, w) / 6`, intensity weight `diagonal / 4`, regions of at least 4 cells.
    pub fn for_grid(grid_h: usize, grid_w: usize) -> Self {
        let diag = ((grid_h * grid_h + grid_w * grid_w) as f64).sqrt();
        Self {
            bandwidth: grid_h.max(grid_w) as f64 / 6.0,
            intensity_weight: diag / 4.0,
            min_region: 4,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Disjoint, 4-connected, non-empty pixel lists.
    pub regions: Vec<Vec<usize>>,
}

impl RegionSet {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }
}

fn shift_to_mode(
    start: [f64; 3],
    points: &[[f64; 3]],
    grid_w: usize,
    params: &MeanShiftParams,
) -> [f64; 3] {
    let h = params.bandwidth;
    let grid_h = points.len() / grid_w;
    let tol = 1e-3 * h;
    let mut y = start;
    for _ in 0..params.max_iter {
        let r0 = (y[0] - h).ceil().max(0.0) as usize;
        let r1 = ((y[0] + h).floor() as isize).min(grid_h as isize - 1);
        let c0 = (y[1] - h).ceil().max(0.0) as usize;
        let c1 = ((y[1] + h).floor() as isize).min(grid_w as isize - 1);
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        if r1 >= r0 as isize && c1 >= c0 as isize {
            for r in r0..=r1 as usize {
                let dr = r as f64 - y[0];
                for c in c0..=c1 as usize {
                    let p = &points[r * grid_w + c];
                    let dc = p[1] - y[1];
                    let di = p[2] - y[2];
                    if dr * dr + dc * dc + di * di <= h * h {
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            break;
        }
        let n = count as f64;
        let next = [acc[0] / n, acc[1] / n, acc[2] / n];
        let step = dist(&next, &y);
        y = next;
        if step < tol {
            break;
        }
    }
    y
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// 4-connected runs of equal cluster id, skipping `skip`, in raster order of
/// their first pixel; each component sorted.
fn same_cluster_components(
    h: usize,
    w: usize,
    cluster_of: &[usize],
    skip: usize,
) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || cluster_of[start] == skip {
            continue;
        }
        let id = cluster_of[start];
        seen[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let p = comp[i];
            i += 1;
            for q in neighbors4(p, h, w) {
                if !seen[q] && cluster_of[q] == id {
                    seen[q] = true;
                    comp.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Mean-shift over (row, col, intensity · weight) features with a flat kernel
/// of radius `bandwidth`.
///
/// Converged modes within half a bandwidth are merged into one cluster. On a
/// flat plateau the kernel leaves interior points where they are, so clusters
/// that touch (4-adjacency) and whose modes differ in weighted intensity by at
/// most half a bandwidth are fused as well. The cluster with the lowest mean
/// intensity is background. Every other cluster is split into 4-connected
/// components and components smaller than `min_region` are discarded. A map
/// with no foreground yields an empty set.
pub fn segment_regions(
    map: &GrayscaleMap,
    params: &MeanShiftParams,
) -> Result<RegionSet, LayoutError> {
    if !(params.bandwidth > 0.0)
        || !params.intensity_weight.is_finite()
        || params.intensity_weight < 0.0
    {
        return Err(LayoutError::InvalidParameter(format!(
            "bandwidth must be positive and intensity weight non-negative, got {} / {}",
            params.bandwidth, params.intensity_weight
        )));
    }
    let (h, w) = (map.grid_h, map.grid_w);
    let half = params.bandwidth / 2.0;
    let points: Vec<[f64; 3]> = (0..h * w)
        .map(|p| {
            [
                (p / w) as f64,
                (p % w) as f64,
                map.values[p] * params.intensity_weight,
            ]
        })
        .collect();

    let mut modes: Vec<[f64; 3]> = Vec::new();
    let mut cluster_of = Vec::with_capacity(points.len());
    for p in &points {
        let mode = shift_to_mode(*p, &points, w, params);
        let id = match modes.iter().position(|c| dist(c, &mode) <= half) {
            Some(id) => id,
            None => {
                modes.push(mode);
                modes.len() - 1
            }
        };
        cluster_of.push(id);
    }

    let mut parent: Vec<usize> = (0..modes.len()).collect();
    for p in 0..h * w {
        for q in [p + 1, p + w] {
            let adjacent = if q == p + 1 {
                (p + 1) % w != 0
            } else {
                q < h * w
            };
            if !adjacent {
                continue;
            }
            let (a, b) = (cluster_of[p], cluster_of[q]);
            if a != b && (modes[a][2] - modes[b][2]).abs() <= half {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    for id in cluster_of.iter_mut() {
        *id = find(&mut parent, *id);
    }

    let mut sums = vec![(0.0, 0usize); modes.len()];
    for (p, &id) in cluster_of.iter().enumerate() {
        sums[id].0 += map.values[p];
        sums[id].1 += 1;
    }
    let mean = |id: usize| sums[id].0 / sums[id].1 as f64;
    let background = (0..modes.len())
        .filter(|&id| sums[id].1 > 0)
        .min_by(|&a, &b| mean(a).total_cmp(&mean(b)))
        .unwrap_or(0);

    let mut regions = same_cluster_components(h, w, &cluster_of, background);
    regions.retain(|c| c.len() >= params.min_region);
    Ok(RegionSet {
        grid_h: h,
        grid_w: w,
        regions,
    })
}
