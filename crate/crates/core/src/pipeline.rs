//! The three stages end to end: identify miscounts, refine the layout, derive
//! guidance.

use serde::Serialize;

use crate::bundle::{AttentionBundle, AttentionKind};
use crate::config::{ConfigError, RunConfig};
use crate::grid::{GrayscaleMap, ScalarMap};
use crate::guidance::{build_guidance, GuidanceError, GuidanceField};
use crate::heads::{select_cross_head, select_self_head, HeadError, HeadScore};
use crate::layout::{
    build_focus_mask, construct_layout, segment_regions, FocusMask, Layout, LayoutError,
};
use crate::prompt::{
    bind_to_model_tokens, parse_count_spec, tokenize, CountEntry, CountSpec, Lexicon, PromptError,
};
use crate::refine::{refine_to_count, RefineError, RefinedLayout};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("prompt counts {0} categories; a cross-attention bundle is needed to tell them apart")]
    MissingCross(usize),
    #[error("bundle mismatch: {0}")]
    BundleMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    pub label: u16,
    pub token_index: usize,
    pub target: u32,
    /// Instance count per frame.
    pub counts: Vec<usize>,
    /// Target minus count per frame; positive means instances are missing.
    pub deficit: Vec<i64>,
    pub mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameHeads {
    pub frame: usize,
    pub self_head: usize,
    /// Chosen cross head per category, `None` without a cross bundle.
    pub cross_heads: Vec<Option<usize>>,
    pub scores: Vec<HeadScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifyReport {
    pub prompt: String,
    pub aligned: bool,
    pub categories: Vec<CategoryReport>,
    pub heads: Vec<FrameHeads>,
}

/// Intermediate maps kept for inspection.
#[derive(Debug, Clone)]
pub struct FrameDebug {
    /// The chosen self head's map.
    pub gray: GrayscaleMap,
    /// Every self head's map, in head order.
    pub head_maps: Vec<GrayscaleMap>,
    /// Per category: the chosen head's cross-attention map and focus mask.
    pub cross: Vec<Option<(ScalarMap, FocusMask)>>,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub spec: CountSpec,
    pub layout: Layout,
    pub report: IdentifyReport,
    pub debug: Vec<FrameDebug>,
}

fn check_bundles(
    self_attn: &AttentionBundle,
    cross: Option<&AttentionBundle>,
) -> Result<(), PipelineError> {
    if self_attn.kind != AttentionKind::SelfAttn {
        return Err(PipelineError::BundleMismatch(format!(
            "expected self-attention, got {:?}",
            self_attn.kind
        )));
    }
    if let Some(c) = cross {
        if c.kind != AttentionKind::CrossAttn {
            return Err(PipelineError::BundleMismatch(format!(
                "expected cross-attention, got {:?}",
                c.kind
            )));
        }
        if (c.frames, c.grid_h, c.grid_w) != (self_attn.frames, self_attn.grid_h, self_attn.grid_w)
        {
            return Err(PipelineError::BundleMismatch(format!(
                "self bundle is {} frames of {}x{}, cross bundle {} frames of {}x{}",
                self_attn.frames, self_attn.grid_h, self_attn.grid_w, c.frames, c.grid_h, c.grid_w
            )));
        }
    }
    Ok(())
}

/// Parses the prompt and, when the cross bundle carries its own token list,
/// re-anchors every noun on it.
pub fn resolve_spec(
    prompt: &str,
    lexicon: &Lexicon,
    cross: Option<&AttentionBundle>,
) -> Result<CountSpec, PipelineError> {
    let spec = parse_count_spec(prompt, lexicon)?;
    let Some(c) = cross else { return Ok(spec) };
    let spec = if c.tokens.is_empty() || c.tokens == tokenize(prompt) {
        spec
    } else {
        bind_to_model_tokens(&spec, prompt, &c.tokens)?
    };
    if let Some(e) = spec.entries.iter().find(|e| e.token_index >= c.text_len) {
        return Err(PipelineError::BundleMismatch(format!(
            "token {} of {:?} outside the {} cross-attention columns",
            e.token_index, e.noun, c.text_len
        )));
    }
    Ok(spec)
}

/// Builds the per-frame layout for every counted noun and compares counts
/// with the prompt.
pub fn identify(
    self_attn: &AttentionBundle,
    cross: Option<&AttentionBundle>,
    prompt: &str,
    lexicon: &Lexicon,
    cfg: &RunConfig,
) -> Result<Identification, PipelineError> {
    cfg.validate()?;
    check_bundles(self_attn, cross)?;
    let spec = resolve_spec(prompt, lexicon, cross)?;
    if cross.is_none() && spec.entries.len() > 1 {
        return Err(PipelineError::MissingCross(spec.entries.len()));
    }
    let (h, w) = (self_attn.grid_h, self_attn.grid_w);
    let mean_shift = cfg.mean_shift(h, w);
    let mut layout = Layout::new(self_attn.frames, h, w);
    let labels: Vec<u16> = spec
        .entries
        .iter()
        .map(|e| layout.register(&e.canonical, Some(e.token_index), Some(e.k)))
        .collect();

    let mut heads = Vec::with_capacity(self_attn.frames);
    let mut debug = Vec::with_capacity(self_attn.frames);
    for frame in 0..self_attn.frames {
        let choice = select_self_head(self_attn, frame, cfg.gamma, cfg.block)?;
        let regions = segment_regions(&choice.map, &mean_shift)?;
        let mut cross_heads = Vec::with_capacity(spec.entries.len());
        let mut cross_dbg = Vec::with_capacity(spec.entries.len());
        for (entry, &label) in spec.entries.iter().zip(&labels) {
            let (mask, dbg) = match cross {
                Some(c) => {
                    let pick = select_cross_head(c, frame, entry.token_index)?;
                    let mask = build_focus_mask(&pick.map, cfg.peak_ratio, cfg.eps, cfg.min_pts)?;
                    cross_heads.push(Some(pick.head));
                    (mask.clone(), Some((pick.map, mask)))
                }
                None => {
                    cross_heads.push(None);
                    (FocusMask::full(h, w), None)
                }
            };
            layout = construct_layout(&regions, &mask, cfg.tau, label, layout, frame)?.0;
            cross_dbg.push(dbg);
        }
        heads.push(FrameHeads {
            frame,
            self_head: choice.head,
            cross_heads,
            scores: choice.scores,
        });
        debug.push(FrameDebug {
            gray: choice.map,
            head_maps: choice.maps,
            cross: cross_dbg,
        });
    }

    let categories: Vec<CategoryReport> = spec
        .entries
        .iter()
        .zip(&labels)
        .map(|(e, &label)| {
            let counts: Vec<usize> = (0..layout.frame_count())
                .map(|f| layout.count(label, f))
                .collect();
            let deficit: Vec<i64> = counts.iter().map(|&m| e.k as i64 - m as i64).collect();
            CategoryReport {
                category: e.canonical.clone(),
                label,
                token_index: e.token_index,
                target: e.k,
                mismatch: deficit.iter().any(|&d| d != 0),
                counts,
                deficit,
            }
        })
        .collect();
    let report = IdentifyReport {
        prompt: prompt.to_string(),
        aligned: categories.iter().all(|c| !c.mismatch),
        categories,
        heads,
    };
    Ok(Identification {
        spec,
        layout,
        report,
        debug,
    })
}

/// Count spec recovered from a layout's registered categories, in label
/// order; categories without a target are skipped.
pub fn spec_from_layout(layout: &Layout) -> CountSpec {
    CountSpec {
        entries: layout
            .labels
            .values()
            .filter_map(|c| {
                Some(CountEntry {
                    noun: c.name.clone(),
                    canonical: c.name.clone(),
                    token_index: c.token_index?,
                    k: c.target?,
                })
            })
            .collect(),
    }
}

pub fn refine(
    layout: Layout,
    spec: &CountSpec,
    cfg: &RunConfig,
) -> Result<RefinedLayout, PipelineError> {
    cfg.validate()?;
    let radius = cfg.radius_for(layout.grid_h, layout.grid_w);
    Ok(refine_to_count(
        layout, spec, cfg.lambda, radius, cfg.stride,
    )?)
}

pub fn guide(
    refined: &RefinedLayout,
    spec: &CountSpec,
    scores: Option<&AttentionBundle>,
    cfg: &RunConfig,
) -> Result<GuidanceField, PipelineError> {
    cfg.validate()?;
    Ok(build_guidance(refined, spec, scores, &cfg.guidance()?)?)
}
