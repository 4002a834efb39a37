//! Generators and brute-force oracles shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use numina_core::bundle::{AttentionBundle, AttentionKind, BundleMeta};
use numina_core::guidance::{build_guidance, GuidanceField, GuidanceParams};
use numina_core::layout::{count_instances, FocusMask, Layout};
use numina_core::prompt::{CountEntry, CountSpec};
use numina_core::refine::{make_template, placement_cost, refine_to_count, Template};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    /// Uniform in `[lo, hi]`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

pub const NOUNS: [&str; 5] = ["cat", "dog", "bird", "cup", "ball"];

fn normalized_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.uniform(0.01, 1.0)).collect();
        let sum: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| (v / sum) as f32));
    }
    out
}

pub fn random_bundle(rng: &mut Rng) -> AttentionBundle {
    let kind = [
        AttentionKind::SelfAttn,
        AttentionKind::CrossAttn,
        AttentionKind::PreSoftmax,
    ][rng.below(3)];
    let (frames, heads) = (rng.range(1, 3), rng.range(1, 4));
    let (grid_h, grid_w) = (rng.range(1, 10), rng.range(1, 10));
    let n = grid_h * grid_w;
    let text_len = match kind {
        AttentionKind::SelfAttn => 0,
        AttentionKind::CrossAttn => rng.range(1, 8),
        AttentionKind::PreSoftmax => rng.range(0, 8),
    };
    let tokens = (0..text_len).map(|i| format!("tok{i}")).collect();
    let cols = if text_len == 0 { n } else { text_len };
    let data = match kind {
        AttentionKind::PreSoftmax => (0..frames * heads * n * cols)
            .map(|_| rng.uniform(-20.0, 20.0) as f32)
            .collect(),
        _ => normalized_rows(rng, frames * heads * n, cols),
    };
    let mut extra = serde_json::Map::new();
    if rng.coin(0.5) {
        extra.insert("model".into(), serde_json::Value::from("toy"));
    }
    AttentionBundle {
        kind,
        frames,
        heads,
        grid_h,
        grid_w,
        text_len,
        tokens,
        meta: BundleMeta {
            timestep: rng.range(0, 50) as u32,
            layer: rng.range(0, 30) as u32,
            extra,
        },
        data,
    }
}

/// Paints a `h`×`w` rectangle with its top-left corner at `(r, c)`, clipped to the grid.
pub fn paint_rect(
    layout: &mut Layout,
    frame: usize,
    label: u16,
    r: usize,
    c: usize,
    h: usize,
    w: usize,
) {
    for rr in r..(r + h).min(layout.grid_h) {
        for cc in c..(c + w).min(layout.grid_w) {
            layout.frames[frame][rr * layout.grid_w + cc] = label;
        }
    }
}

/// Layout with 1 to 3 categories painted as random rectangles.
pub fn random_layout(rng: &mut Rng) -> Layout {
    let frames = rng.range(1, 3);
    let (h, w) = (rng.range(2, 20), rng.range(2, 20));
    let mut layout = Layout::new(frames, h, w);
    let cats = rng.range(1, 3);
    for (i, noun) in NOUNS.iter().take(cats).enumerate() {
        let token = rng.coin(0.7).then(|| i + 1);
        let target = rng.coin(0.7).then(|| rng.range(1, 8) as u32);
        let label = layout.register(noun, token, target);
        for f in 0..frames {
            for _ in 0..rng.range(0, 4) {
                let (r, c) = (rng.below(h), rng.below(w));
                paint_rect(
                    &mut layout,
                    f,
                    label,
                    r,
                    c,
                    rng.range(1, 4),
                    rng.range(1, 4),
                );
            }
        }
    }
    layout
}

/// A refinement problem: blobs of up to three categories on a 16–28 grid and
/// targets in 1..=8. Some categories start empty and some start above target.
pub fn random_refine_case(rng: &mut Rng) -> (Layout, CountSpec) {
    let frames = rng.range(1, 3);
    let (h, w) = (rng.range(16, 28), rng.range(16, 28));
    let mut layout = Layout::new(frames, h, w);
    let cats = rng.range(1, 3);
    let mut entries = Vec::new();
    for (i, noun) in NOUNS.iter().take(cats).enumerate() {
        let label = layout.register(noun, Some(i + 1), None);
        let blobs = match rng.below(3) {
            0 => 0,
            1 => rng.range(1, 4),
            _ => rng.range(5, 10),
        };
        for f in 0..frames {
            for _ in 0..blobs {
                let (r, c) = (rng.below(h), rng.below(w));
                paint_rect(
                    &mut layout,
                    f,
                    label,
                    r,
                    c,
                    rng.range(1, 3),
                    rng.range(1, 3),
                );
            }
        }
        entries.push(CountEntry {
            noun: format!("{noun}s"),
            canonical: noun.to_string(),
            token_index: i + 1,
            k: rng.range(1, 8) as u32,
        });
    }
    (layout, CountSpec { entries })
}

/// Overlap by scanning every grid cell.
pub fn brute_overlap(region: &[usize], mask: &FocusMask) -> f64 {
    let n = mask.grid_h * mask.grid_w;
    let inside = (0..n)
        .filter(|p| region.contains(p) && mask.mask[*p])
        .count();
    inside as f64 / region.len() as f64
}

fn all_counts(layout: &Layout, frame: usize) -> Vec<usize> {
    layout
        .labels
        .keys()
        .map(|&l| count_instances(layout, l, frame).unwrap())
        .collect()
}

/// Cheapest center over every cell, scanned row-major with a strict `<` so
/// the first minimum wins. A center is admissible when painting the template
/// adds exactly one instance of `label` and leaves every other count alone.
pub fn exhaustive_placement(
    layout: &Layout,
    label: u16,
    frame: usize,
    template: &Template,
    prev: Option<(f64, f64)>,
    lambda: f64,
) -> Option<((usize, usize), f64)> {
    let before = all_counts(layout, frame);
    let idx = layout.labels.keys().position(|&l| l == label).unwrap();
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..layout.grid_h {
        for c in 0..layout.grid_w {
            let Some(pixels) = template.pixels_at((r, c), layout.grid_h, layout.grid_w) else {
                continue;
            };
            let mut trial = layout.clone();
            for &p in &pixels {
                trial.frames[frame][p] = label;
            }
            let after = all_counts(&trial, frame);
            let admissible = after.iter().zip(&before).enumerate().all(|(i, (a, b))| {
                if i == idx {
                    *a == b + 1
                } else {
                    a == b
                }
            });
            if !admissible {
                continue;
            }
            let cost = placement_cost((r, c), template, layout, label, frame, prev, lambda)
                .unwrap()
                .total;
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some(((r, c), cost));
            }
        }
    }
    best
}

/// Reference row softmax.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// A scene for placement: a few blobs of two categories and a template that
/// is either a disk or a copy of an existing region.
pub fn placement_case(rng: &mut Rng) -> (Layout, u16, usize, Template, Option<(f64, f64)>) {
    let frames = rng.range(1, 2);
    let (h, w) = (rng.range(8, 16), rng.range(8, 16));
    let mut layout = Layout::new(frames, h, w);
    let cat = layout.register("cat", Some(1), None);
    let dog = layout.register("dog", Some(2), None);
    for f in 0..frames {
        for &label in &[cat, dog] {
            for _ in 0..rng.range(0, 3) {
                let (r, c) = (rng.below(h), rng.below(w));
                paint_rect(
                    &mut layout,
                    f,
                    label,
                    r,
                    c,
                    rng.range(1, 3),
                    rng.range(1, 3),
                );
            }
        }
    }
    let frame = frames - 1;
    let template = if rng.coin(0.5) {
        make_template(&layout, cat, frame, rng.range(0, 2))
    } else {
        Template::circle(rng.range(0, 2))
    };
    let prev = (frame > 0 && rng.coin(0.7))
        .then(|| (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64)));
    (layout, cat, frame, template, prev)
}

pub fn random_scores(
    rng: &mut Rng,
    frames: usize,
    heads: usize,
    n: usize,
    text_len: usize,
) -> AttentionBundle {
    AttentionBundle {
        kind: AttentionKind::PreSoftmax,
        frames,
        heads,
        grid_h: 1,
        grid_w: n,
        text_len,
        tokens: (0..text_len).map(|i| format!("t{i}")).collect(),
        meta: BundleMeta::default(),
        data: (0..frames * heads * n * text_len)
            .map(|_| rng.uniform(-20.0, 20.0) as f32)
            .collect(),
    }
}

/// A refined random case, its field and matching pre-softmax scores.
pub fn guided_case(seed: u64) -> (GuidanceField, AttentionBundle) {
    let mut rng = Rng::new(seed);
    let (layout, spec) = random_refine_case(&mut rng);
    let (h, w) = (layout.grid_h, layout.grid_w);
    let text_len = spec.entries.len() + 2;
    let refined = refine_to_count(layout, &spec, 8.0, 2, 2).unwrap();
    let mut scores = random_scores(&mut rng, refined.layout.frame_count(), 2, h * w, text_len);
    scores.grid_h = h;
    scores.grid_w = w;
    let field = build_guidance(&refined, &spec, Some(&scores), &GuidanceParams::default()).unwrap();
    (field, scores)
}
