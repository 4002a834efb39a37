//! Instance-separability score of a grayscale head map.

use serde::{Deserialize, Serialize};

use crate::grid::GrayscaleMap;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: usize,
    /// Contrast: population standard deviation of the map.
    pub s1: f64,
    /// Structure: variance of per-block sums.
    pub s2: f64,
    /// Edge clarity: mean Sobel gradient magnitude.
    pub s3: f64,
    pub total: f64,
}

/// Population variance, computed on values shifted by the first one so a
/// constant input gives exactly zero.
fn population_variance(values: &[f64]) -> f64 {
    let Some(&shift) = values.first() else {
        return 0.0;
    };
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    values
        .iter()
        .map(|v| (v - shift - mean).powi(2))
        .sum::<f64>()
        / n
}

pub fn contrast(map: &GrayscaleMap) -> f64 {
    population_variance(&map.values).sqrt()
}

/// Variance across non-overlapping `block`×`block` tiles of the tile sums.
/// Tiles on the right and bottom edge may be partial.
pub fn block_variance(map: &GrayscaleMap, block: usize) -> f64 {
    let block = block.max(1);
    let (bh, bw) = (map.grid_h.div_ceil(block), map.grid_w.div_ceil(block));
    let mut sums = vec![0.0; bh * bw];
    for r in 0..map.grid_h {
        for c in 0..map.grid_w {
            sums[(r / block) * bw + c / block] += map.get(r, c);
        }
    }
    population_variance(&sums)
}

/// Per-pixel Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(map: &GrayscaleMap) -> Vec<f64> {
    let (h, w) = (map.grid_h as isize, map.grid_w as isize);
    let at = |r: isize, c: isize| map.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize);
    let mut out = Vec::with_capacity(map.len());
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

pub fn edge_clarity(map: &GrayscaleMap) -> f64 {
    let mags = sobel_magnitude(map);
    mags.iter().sum::<f64>() / mags.len() as f64
}

/// `s1 + s2 + gamma * s3`. `block` is clamped into `[1, min(grid_h, grid_w)]`.
pub fn discriminability_score(map: &GrayscaleMap, gamma: f64, block: usize) -> HeadScore {
    let block = block.clamp(1, map.grid_h.min(map.grid_w).max(1));
    let s1 = contrast(map);
    let s2 = block_variance(map, block);
    let s3 = edge_clarity(map);
    HeadScore {
        head: 0,
        s1,
        s2,
        s3,
        total: s1 + s2 + gamma * s3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_scores_zero() {
        let map = GrayscaleMap::new(4, 4, vec![0.7; 16]);
        let s = discriminability_score(&map, 0.5, 2);
        assert_eq!((s.s1, s.s2, s.s3, s.total), (0.0, 0.0, 0.0, 0.0));
        let zero = discriminability_score(&GrayscaleMap::new(4, 4, vec![0.0; 16]), 0.5, 2);
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn two_by_two_step() {
        let map = GrayscaleMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let s = discriminability_score(&map, 0.0, 2);
        assert_eq!(s.s1, 0.5);
        assert_eq!(s.s2, 0.0);
        assert_eq!(s.total, 0.5);
    }

    #[test]
    fn partial_edge_blocks() {
        // 3x3 with block 2: tiles of 4, 2, 2 and 1 pixels.
        let map = GrayscaleMap::new(3, 3, vec![1.0; 9]);
        let sums = [4.0f64, 2.0, 2.0, 1.0];
        let mean = sums.iter().sum::<f64>() / 4.0;
        let var = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 4.0;
        assert_eq!(block_variance(&map, 2), var);
    }

    #[test]
    fn sobel_of_vertical_step() {
        // columns 0,1 dark, 2,3 bright: interior gradient 4 at columns 1 and 2.
        let map = GrayscaleMap::new(3, 4, [0.0, 0.0, 1.0, 1.0].repeat(3));
        let mags = sobel_magnitude(&map);
        for r in 0..3 {
            assert_eq!(&mags[r * 4..r * 4 + 4], &[0.0, 4.0, 4.0, 0.0]);
        }
    }
}
