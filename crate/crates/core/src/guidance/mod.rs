//! Per-pixel cross-attention edits derived from refinement deltas, and their
//! application to pre-softmax scores.

mod ngdf;

use serde::{Deserialize, Serialize};

pub use ngdf::{decode_field, encode_field, read_field, write_field, NGDF_MAGIC};

use crate::bundle::{AttentionBundle, AttentionKind};
use crate::prompt::CountSpec;
use crate::refine::{EditOp, RefinedLayout, TemplateOrigin};

pub const DEFAULT_K: f64 = 0.8;
pub const DEFAULT_NEG_CONST: f64 = -1e4;
pub const DEFAULT_FRACTION: f64 = 0.6;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("reference mask is empty")]
    EmptyReference,
    #[error("a copied-template addition needs a pre-softmax score bundle")]
    MissingScores,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported guidance version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed guidance file: {0}")]
    Malformed(String),
}

/// Linear decay from 1 at step 0 to 0 at `fraction · total_steps`.
pub fn delta_schedule(t: usize, total_steps: usize, fraction: f64) -> f64 {
    let window = fraction * total_steps as f64;
    if window <= 0.0 {
        return if t == 0 { 1.0 } else { 0.0 };
    }
    (1.0 - t as f64 / window).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub total_steps: usize,
    pub fraction: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_STEPS,
            fraction: DEFAULT_FRACTION,
        }
    }
}

impl DecaySchedule {
    pub fn new(total_steps: usize, fraction: f64) -> Result<Self, GuidanceError> {
        if total_steps == 0 || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(GuidanceError::InvalidParameter(format!(
                "need total_steps >= 1 and fraction in (0, 1], got {total_steps} / {fraction}"
            )));
        }
        Ok(Self {
            total_steps,
            fraction,
        })
    }

    pub fn delta(&self, t: usize) -> f64 {
        delta_schedule(t, self.total_steps, self.fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum GuidanceMode {
    #[default]
    None = 0,
    /// Bias `neg_const`, not scheduled.
    Suppress = 1,
    /// Bias `base · δ(t)`.
    Boost = 2,
    /// Score replaced by `base · δ(t)`.
    Overwrite = 3,
}

impl GuidanceMode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::None),
            1 => Some(Self::Suppress),
            2 => Some(Self::Boost),
            3 => Some(Self::Overwrite),
            _ => None,
        }
    }
}

/// One guided text token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSlot {
    pub category: String,
    /// Column in the cross-attention token list.
    pub token_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceField {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub slots: Vec<TokenSlot>,
    pub neg_const: f32,
    pub k: f32,
    pub fraction: f32,
    pub total_steps: u32,
    /// `[frame][slot][pixel]`, flattened.
    pub modes: Vec<GuidanceMode>,
    pub base: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotSummary {
    pub category: String,
    pub token_index: usize,
    pub suppressed: usize,
    pub boosted: usize,
    pub overwritten: usize,
}

impl GuidanceField {
    pub fn empty(frames: usize, grid_h: usize, grid_w: usize, slots: Vec<TokenSlot>) -> Self {
        let len = frames * slots.len() * grid_h * grid_w;
        Self {
            frames,
            grid_h,
            grid_w,
            slots,
            neg_const: DEFAULT_NEG_CONST as f32,
            k: DEFAULT_K as f32,
            fraction: DEFAULT_FRACTION as f32,
            total_steps: DEFAULT_STEPS as u32,
            modes: vec![GuidanceMode::None; len],
            base: vec![0.0; len],
        }
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn offset(&self, frame: usize, slot: usize) -> usize {
        (frame * self.slots.len() + slot) * self.positions()
    }

    pub fn modes_at(&self, frame: usize, slot: usize) -> &[GuidanceMode] {
        let o = self.offset(frame, slot);
        &self.modes[o..o + self.positions()]
    }

    pub fn base_at(&self, frame: usize, slot: usize) -> &[f32] {
        let o = self.offset(frame, slot);
        &self.base[o..o + self.positions()]
    }

    fn set(&mut self, frame: usize, slot: usize, pixel: usize, mode: GuidanceMode, base: f32) {
        let i = self.offset(frame, slot) + pixel;
        self.modes[i] = mode;
        self.base[i] = base;
    }

    pub fn schedule(&self) -> DecaySchedule {
        DecaySchedule {
            total_steps: self.total_steps as usize,
            fraction: self.fraction as f64,
        }
    }

    pub fn summary(&self) -> Vec<SlotSummary> {
        self.slots
            .iter()
            .enumerate()
            .map(|(s, slot)| {
                let mut sum = SlotSummary {
                    category: slot.category.clone(),
                    token_index: slot.token_index,
                    suppressed: 0,
                    boosted: 0,
                    overwritten: 0,
                };
                for f in 0..self.frames {
                    for m in self.modes_at(f, s) {
                        match m {
                            GuidanceMode::Suppress => sum.suppressed += 1,
                            GuidanceMode::Boost => sum.boosted += 1,
                            GuidanceMode::Overwrite => sum.overwritten += 1,
                            GuidanceMode::None => {}
                        }
                    }
                }
                sum
            })
            .collect()
    }
}

fn check_scores(scores: &AttentionBundle) -> Result<(), GuidanceError> {
    if scores.kind != AttentionKind::PreSoftmax || scores.text_len == 0 {
        return Err(GuidanceError::DimMismatch(format!(
            "expected a pre-softmax bundle over text tokens, got {:?} with text_len {}",
            scores.kind, scores.text_len
        )));
    }
    Ok(())
}

/// Mean pre-softmax score of column `token` over the reference pixels.
pub fn mean_ref_score(
    scores: &AttentionBundle,
    reference: &[usize],
    frame: usize,
    head: usize,
    token: usize,
) -> Result<f64, GuidanceError> {
    check_scores(scores)?;
    if reference.is_empty() {
        return Err(GuidanceError::EmptyReference);
    }
    if frame >= scores.frames || head >= scores.heads || token >= scores.text_len {
        return Err(GuidanceError::DimMismatch(format!(
            "frame {frame}, head {head}, token {token} outside bundle of {} frames, {} heads, {} tokens",
            scores.frames, scores.heads, scores.text_len
        )));
    }
    if let Some(&p) = reference.iter().find(|&&p| p >= scores.positions()) {
        return Err(GuidanceError::DimMismatch(format!(
            "reference pixel {p} outside the grid"
        )));
    }
    let m = scores.matrix(frame, head);
    let sum: f64 = reference
        .iter()
        .map(|&p| m[p * scores.text_len + token] as f64)
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Head-averaged [`mean_ref_score`].
pub fn mean_ref_score_all_heads(
    scores: &AttentionBundle,
    reference: &[usize],
    frame: usize,
    token: usize,
) -> Result<f64, GuidanceError> {
    let mut total = 0.0;
    for head in 0..scores.heads {
        total += mean_ref_score(scores, reference, frame, head, token)?;
    }
    Ok(total / scores.heads.max(1) as f64)
}

/// Guidance parameters stored in the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub k: f64,
    pub neg_const: f64,
    pub schedule: DecaySchedule,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            neg_const: DEFAULT_NEG_CONST,
            schedule: DecaySchedule::default(),
        }
    }
}

/// Removed pixels become `Suppress`; pixels added with a disk become `Boost`
/// with base `k`; pixels added with a copied region become `Overwrite` with
/// base equal to the head-averaged mean score over the copied reference.
/// One token slot per spec entry, in spec order.
pub fn build_guidance(
    refined: &RefinedLayout,
    spec: &CountSpec,
    scores: Option<&AttentionBundle>,
    params: &GuidanceParams,
) -> Result<GuidanceField, GuidanceError> {
    if !(params.k > 0.0) || !(params.neg_const < 0.0) {
        return Err(GuidanceError::InvalidParameter(format!(
            "need k > 0 and neg_const < 0, got {} / {}",
            params.k, params.neg_const
        )));
    }
    let schedule = DecaySchedule::new(params.schedule.total_steps, params.schedule.fraction)?;
    let layout = &refined.layout;
    let labels: Vec<u16> = layout.labels.keys().copied().collect();
    let slots: Vec<TokenSlot> = spec
        .entries
        .iter()
        .map(|e| TokenSlot {
            category: e.canonical.clone(),
            token_index: layout
                .label_of(&e.canonical)
                .and_then(|l| layout.labels[&l].token_index)
                .unwrap_or(e.token_index),
        })
        .collect();
    if let Some(s) = scores {
        check_scores(s)?;
        if s.frames != layout.frame_count()
            || (s.grid_h, s.grid_w) != (layout.grid_h, layout.grid_w)
        {
            return Err(GuidanceError::DimMismatch(format!(
                "scores are {} frames of {}x{}, layout is {} frames of {}x{}",
                s.frames,
                s.grid_h,
                s.grid_w,
                layout.frame_count(),
                layout.grid_h,
                layout.grid_w
            )));
        }
    }

    let mut field = GuidanceField::empty(layout.frame_count(), layout.grid_h, layout.grid_w, slots);
    field.neg_const = params.neg_const as f32;
    field.k = params.k as f32;
    field.fraction = schedule.fraction as f32;
    field.total_steps = schedule.total_steps as u32;

    for (slot_idx, slot) in field.slots.clone().iter().enumerate() {
        let Some(label) = layout.label_of(&slot.category) else {
            continue;
        };
        let cat_idx = labels.iter().position(|&l| l == label).unwrap();
        for frame in 0..layout.frame_count() {
            for &p in &refined.deltas[frame][cat_idx].removed {
                field.set(
                    frame,
                    slot_idx,
                    p,
                    GuidanceMode::Suppress,
                    params.neg_const as f32,
                );
            }
        }
        for e in refined
            .edits
            .iter()
            .filter(|e| e.op == EditOp::Add && e.category == slot.category)
        {
            let added = &refined.deltas[e.frame][cat_idx].added;
            let (mode, base) = match &e.template {
                Some(TemplateOrigin::CopiedRegion { reference }) => {
                    let s = scores.ok_or(GuidanceError::MissingScores)?;
                    (
                        GuidanceMode::Overwrite,
                        mean_ref_score_all_heads(s, reference, e.frame, slot.token_index)?,
                    )
                }
                _ => (GuidanceMode::Boost, params.k),
            };
            for &p in e.pixels.iter().filter(|p| added.binary_search(p).is_ok()) {
                field.set(e.frame, slot_idx, p, mode, base as f32);
            }
        }
    }
    Ok(field)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row softmax of an N×L score matrix with the field's edits for `frame` at step `t`.
pub fn apply_guidance(
    scores: &[f32],
    text_len: usize,
    field: &GuidanceField,
    frame: usize,
    t: usize,
) -> Result<Vec<f64>, GuidanceError> {
    let n = field.positions();
    if scores.len() != n * text_len {
        return Err(GuidanceError::DimMismatch(format!(
            "score matrix has {} values, field expects {n}x{text_len}",
            scores.len()
        )));
    }
    if frame >= field.frames {
        return Err(GuidanceError::DimMismatch(format!(
            "frame {frame} outside field of {} frames",
            field.frames
        )));
    }
    if let Some(slot) = field.slots.iter().find(|s| s.token_index >= text_len) {
        return Err(GuidanceError::DimMismatch(format!(
            "token {} outside {text_len} columns",
            slot.token_index
        )));
    }
    let delta = field.schedule().delta(t);
    let mut out: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
    for (s, slot) in field.slots.iter().enumerate() {
        let modes = field.modes_at(frame, s);
        let base = field.base_at(frame, s);
        for p in 0..n {
            let cell = &mut out[p * text_len + slot.token_index];
            match modes[p] {
                GuidanceMode::None => {}
                GuidanceMode::Suppress => *cell += field.neg_const as f64,
                GuidanceMode::Boost => *cell += base[p] as f64 * delta,
                GuidanceMode::Overwrite => *cell = base[p] as f64 * delta,
            }
        }
    }
    for row in out.chunks_exact_mut(text_len) {
        softmax_row(row);
    }
    Ok(out)
}
