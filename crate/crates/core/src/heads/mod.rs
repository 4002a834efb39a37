//! Per-frame choice of the most instance-separable self-attention head and the
//! most concentrated cross-attention head for each counted noun.

mod pca;
mod score;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;

pub use pca::{pca_grayscale, principal_components, Pca, DENSE_LIMIT};
pub use score::{
    block_variance, contrast, discriminability_score, edge_clarity, sobel_magnitude, HeadScore,
    DEFAULT_BLOCK, DEFAULT_GAMMA,
};

use crate::bundle::{AttentionBundle, AttentionKind};
use crate::grid::{GrayscaleMap, ScalarMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadError {
    #[error("expected a {expected:?} bundle, got {actual:?}")]
    WrongKind {
        expected: AttentionKind,
        actual: AttentionKind,
    },
    #[error("frame {frame} out of range ({frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("token {token} out of range (text_len {text_len})")]
    TokenOutOfRange { token: usize, text_len: usize },
    #[error("bad attention shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfHeadChoice {
    pub head: usize,
    pub map: GrayscaleMap,
    /// Every head's score, in head order.
    pub scores: Vec<HeadScore>,
    /// Every head's grayscale map, in head order.
    #[serde(skip)]
    pub maps: Vec<GrayscaleMap>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossHeadChoice {
    pub head: usize,
    /// Column of the chosen head for the token, reshaped to the grid.
    pub map: ScalarMap,
    pub peak: f64,
    pub peaks: Vec<f64>,
}

/// First index of the maximum; ties go to the lowest index.
pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_frame(bundle: &AttentionBundle, frame: usize) -> Result<(), HeadError> {
    if frame >= bundle.frames {
        return Err(HeadError::FrameOutOfRange {
            frame,
            frames: bundle.frames,
        });
    }
    Ok(())
}

fn score_head(
    bundle: &AttentionBundle,
    frame: usize,
    head: usize,
    gamma: f64,
    block: usize,
) -> Result<(HeadScore, GrayscaleMap), HeadError> {
    let map = pca_grayscale(bundle.matrix(frame, head), bundle.grid_h, bundle.grid_w)?;
    let mut score = discriminability_score(&map, gamma, block);
    score.head = head;
    Ok((score, map))
}

/// Scores every head of one frame and keeps the best (lowest index on ties).
pub fn select_self_head(
    bundle: &AttentionBundle,
    frame: usize,
    gamma: f64,
    block: usize,
) -> Result<SelfHeadChoice, HeadError> {
    if bundle.kind != AttentionKind::SelfAttn {
        return Err(HeadError::WrongKind {
            expected: AttentionKind::SelfAttn,
            actual: bundle.kind,
        });
    }
    check_frame(bundle, frame)?;
    #[cfg(feature = "parallel")]
    let scored: Vec<_> = (0..bundle.heads)
        .into_par_iter()
        .map(|h| score_head(bundle, frame, h, gamma, block))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<_> = (0..bundle.heads)
        .map(|h| score_head(bundle, frame, h, gamma, block))
        .collect();

    let mut scores = Vec::with_capacity(bundle.heads);
    let mut maps = Vec::with_capacity(bundle.heads);
    for r in scored {
        let (s, m) = r?;
        scores.push(s);
        maps.push(m);
    }
    let head = argmax_first(scores.iter().map(|s| s.total));
    Ok(SelfHeadChoice {
        head,
        map: maps[head].clone(),
        scores,
        maps,
    })
}

/// Picks the head whose column for `token` has the highest peak.
pub fn select_cross_head(
    bundle: &AttentionBundle,
    frame: usize,
    token: usize,
) -> Result<CrossHeadChoice, HeadError> {
    if bundle.kind != AttentionKind::CrossAttn {
        return Err(HeadError::WrongKind {
            expected: AttentionKind::CrossAttn,
            actual: bundle.kind,
        });
    }
    check_frame(bundle, frame)?;
    if token >= bundle.text_len {
        return Err(HeadError::TokenOutOfRange {
            token,
            text_len: bundle.text_len,
        });
    }
    let column = |head: usize| -> Vec<f64> {
        bundle
            .matrix(frame, head)
            .chunks_exact(bundle.text_len)
            .map(|row| row[token] as f64)
            .collect()
    };
    let peaks: Vec<f64> = (0..bundle.heads)
        .map(|h| column(h).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let head = argmax_first(peaks.iter().copied());
    Ok(CrossHeadChoice {
        head,
        map: ScalarMap::new(bundle.grid_h, bundle.grid_w, column(head)),
        peak: peaks[head],
        peaks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::BundleMeta;

    fn cross_with_peaks(peaks: &[f32], l: usize) -> AttentionBundle {
        // 2x2 grid; token 1 carries `peak` at position 3 of each head.
        let mut data = Vec::new();
        for &p in peaks {
            for pos in 0..4 {
                let v = if pos == 3 { p } else { 1.0 / l as f32 };
                let rest = (1.0 - v) / (l - 1) as f32;
                for t in 0..l {
                    data.push(if t == 1 { v } else { rest });
                }
            }
        }
        AttentionBundle {
            kind: AttentionKind::CrossAttn,
            frames: 1,
            heads: peaks.len(),
            grid_h: 2,
            grid_w: 2,
            text_len: l,
            tokens: (0..l).map(|i| format!("t{i}")).collect(),
            meta: BundleMeta::default(),
            data,
        }
    }

    #[test]
    fn cross_argmax() {
        let b = cross_with_peaks(&[0.2, 0.9, 0.5], 4);
        assert!(b.validate().is_empty());
        let c = select_cross_head(&b, 0, 1).unwrap();
        assert_eq!(c.head, 1);
        assert!((c.peak - 0.9).abs() < 1e-6);
        assert_eq!(argmax_first(c.map.values.iter().copied()), 3);
    }

    #[test]
    fn cross_uniform_ties_to_head_zero() {
        let b = cross_with_peaks(&[0.25, 0.25], 4);
        let c = select_cross_head(&b, 0, 1).unwrap();
        assert_eq!(c.head, 0);
        assert!((c.peak - 0.25).abs() < 1e-7);
    }

    #[test]
    fn cross_errors() {
        let b = cross_with_peaks(&[0.5], 3);
        assert!(matches!(
            select_cross_head(&b, 0, 3),
            Err(HeadError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            select_cross_head(&b, 1, 0),
            Err(HeadError::FrameOutOfRange { .. })
        ));
        assert!(matches!(
            select_self_head(&b, 0, 0.5, 2),
            Err(HeadError::WrongKind { .. })
        ));
    }

    fn self_bundle(heads: Vec<Vec<f32>>, h: usize, w: usize) -> AttentionBundle {
        AttentionBundle {
            kind: AttentionKind::SelfAttn,
            frames: 1,
            heads: heads.len(),
            grid_h: h,
            grid_w: w,
            text_len: 0,
            tokens: vec![],
            meta: BundleMeta::default(),
            data: heads.concat(),
        }
    }

    #[test]
    fn single_and_tied_heads() {
        let n = 16;
        let uniform = vec![1.0 / n as f32; n * n];
        let b = self_bundle(vec![uniform.clone()], 4, 4);
        assert_eq!(select_self_head(&b, 0, 0.5, 2).unwrap().head, 0);
        let b = self_bundle(vec![uniform.clone(), uniform], 4, 4);
        assert_eq!(select_self_head(&b, 0, 0.5, 2).unwrap().head, 0);
    }
}
