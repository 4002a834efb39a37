//! Synthetic attention bundles with planted ground truth.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`).
//! A uniform draw is `(next_u64() >> 11) * 2^-53`; Gaussians come in pairs
//! from Box-Muller on two consecutive uniforms, cosine branch first. Each bundle has its own
//! stream (`set_stream`): 0 for self-attention, 1 for cross-attention, 2 for
//! random scene layouts. Values are generated frame by frame, head by head,
//! row by row. Heads without planted structure get uniform logit noise; the
//! `noise_sigma` perturbation of planted heads is Gaussian.
//!
//! The planted self-attention head gives every pixel a mixture distribution:
//! instance rows put a share on their own instance, a larger share on their
//! instance's attention group (instances are dealt round-robin into three
//! groups with decreasing strength) and spread the rest uniformly; background
//! rows lean towards the background. Rows are identical within an instance and
//! differ across instances, and the top three principal components line up
//! with the three groups, which keeps every instance brighter than the
//! background in the head's grayscale map for any instance count.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{AttentionBundle, AttentionKind, BundleMeta};
use crate::layout::{Layout, BACKGROUND};
use crate::prompt::tokenize;

/// Attention share of an instance row on its group, by group.
pub const GROUP_SHARE: [f64; 3] = [0.6, 0.45, 0.3];
/// Attention share of an instance row on its own instance.
pub const INSTANCE_SHARE: f64 = 0.15;
/// Attention share of a background row on the background.
pub const BACKGROUND_SHARE: f64 = 0.8;
/// Logit bonus of a category token at that category's instance pixels in the
/// planted cross head (`ln 100`); the same amount is subtracted elsewhere.
pub const CROSS_BONUS: f64 = 4.605_170_185_988_092;
/// Standard deviation of the logit noise of heads that carry no structure.
/// Distractor logits are uniform, `scale · √3 · (2u - 1)`.
pub const SELF_DISTRACTOR_SCALE: f64 = 1.0;
pub const CROSS_DISTRACTOR_SCALE: f64 = 0.5;

const NUMBER_WORDS: [&str; 8] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("instance {instance} leaves the {grid_h}x{grid_w} grid in frame {frame}")]
    SpecOutOfBounds {
        instance: usize,
        frame: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("instances {a} and {b} touch in frame {frame}")]
    InstancesTouch { a: usize, b: usize, frame: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { height: usize, width: usize },
    Disk { radius: usize },
}

impl Shape {
    /// Offsets around the anchor cell.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        match *self {
            Shape::Rect { height, width } => {
                let (h, w) = (height as i64, width as i64);
                let (r0, c0) = ((h - 1) / 2, (w - 1) / 2);
                (0..h)
                    .flat_map(|r| (0..w).map(move |c| (r - r0, c - c0)))
                    .collect()
            }
            Shape::Disk { radius } => {
                let r = radius as i64;
                (-r..=r)
                    .flat_map(|dr| (-r..=r).map(move |dc| (dr, dc)))
                    .filter(|(dr, dc)| dr * dr + dc * dc <= r * r)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    /// Index into `SceneSpec::categories`.
    pub category: usize,
    pub shape: Shape,
    /// Anchor (row, col) in frame 0.
    pub center: [f64; 2],
    /// Anchor displacement per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Scales the planted attention shares; in (0, 1].
    #[serde(default = "one")]
    pub intensity: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    /// Singular noun.
    pub name: String,
    /// Cross-attention head that concentrates on this category.
    pub cross_peak_head: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub heads: usize,
    pub categories: Vec<CategorySpec>,
    pub instances: Vec<InstanceSpec>,
    /// Standard deviation of Gaussian noise added to the planted heads' logits.
    #[serde(default)]
    pub noise_sigma: f64,
    pub discriminative_head: usize,
    #[serde(default)]
    pub seed: u64,
    /// Counts the prompt states, per category. Defaults to the planted
    /// counts; set it to script a mismatch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_counts: Option<Vec<u32>>,
}

/// Everything `synth_scene` produces.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub prompt: String,
    pub self_attn: AttentionBundle,
    pub cross_attn: AttentionBundle,
    /// Cross-attention logits before the softmax, `[F, H, N, text_len]`.
    pub pre_softmax: AttentionBundle,
    pub truth: Layout,
}

/// Plural used in generated prompts.
pub fn pluralize(noun: &str) -> String {
    if let Some(stem) = noun.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            return format!("{stem}ies");
        }
    }
    if ["s", "x", "z", "ch", "sh"]
        .iter()
        .any(|s| noun.ends_with(s))
    {
        return format!("{noun}es");
    }
    format!("{noun}s")
}

/// "three cats and two dogs" style prompt; categories with a zero count are left out.
pub fn counting_prompt(names: &[&str], counts: &[u32]) -> String {
    let parts: Vec<String> = names
        .iter()
        .zip(counts)
        .filter(|(_, &k)| k > 0)
        .map(|(name, &k)| {
            let word = NUMBER_WORDS
                .get(k as usize - 1)
                .map_or_else(|| k.to_string(), |w| w.to_string());
            let noun = if k == 1 {
                name.to_string()
            } else {
                pluralize(name)
            };
            format!("{word} {noun}")
        })
        .collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

pub(crate) struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub(crate) fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub(crate) fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * sin);
        r * cos
    }

    /// Uniform with standard deviation `scale`, centered on zero.
    pub(crate) fn centered(&mut self, scale: f64) -> f64 {
        scale * 3f64.sqrt() * (2.0 * self.uniform() - 1.0)
    }

    /// Uniform integer in `lo..=hi`.
    pub(crate) fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + ((self.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
    }
}

impl SceneSpec {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn planted_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.categories.len()];
        for inst in &self.instances {
            counts[inst.category] += 1;
        }
        counts
    }

    /// Prompt stating the planted counts (a category without instances is
    /// asked for once, so every category keeps a token).
    /// The prompt naming every category with its stated count (planted
    /// counts of zero are stated as one).
    pub fn prompt(&self) -> String {
        let counts: Vec<u32> = match &self.prompt_counts {
            Some(c) => c.clone(),
            None => self.planted_counts().iter().map(|&k| k.max(1)).collect(),
        };
        self.prompt_with(&counts)
    }

    pub fn prompt_with(&self, counts: &[u32]) -> String {
        let names: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        counting_prompt(&names, counts)
    }

    /// Pixels of `instance` in `frame`.
    pub fn pixels(&self, instance: usize, frame: usize) -> Result<Vec<usize>, SynthError> {
        let inst = &self.instances[instance];
        let r = (inst.center[0] + inst.velocity[0] * frame as f64).round() as i64;
        let c = (inst.center[1] + inst.velocity[1] * frame as f64).round() as i64;
        inst.shape
            .offsets()
            .into_iter()
            .map(|(dr, dc)| {
                let (pr, pc) = (r + dr, c + dc);
                if pr < 0 || pc < 0 || pr >= self.grid_h as i64 || pc >= self.grid_w as i64 {
                    return Err(SynthError::SpecOutOfBounds {
                        instance,
                        frame,
                        grid_h: self.grid_h,
                        grid_w: self.grid_w,
                    });
                }
                Ok(pr as usize * self.grid_w + pc as usize)
            })
            .collect()
    }

    /// Instance id + 1 per pixel for one frame; 0 is background.
    fn instance_map(&self, frame: usize) -> Result<Vec<usize>, SynthError> {
        let mut map = vec![0usize; self.positions()];
        for i in 0..self.instances.len() {
            for p in self.pixels(i, frame)? {
                if map[p] != 0 {
                    return Err(SynthError::InstancesTouch {
                        a: map[p] - 1,
                        b: i,
                        frame,
                    });
                }
                map[p] = i + 1;
            }
        }
        for p in 0..map.len() {
            if map[p] == 0 {
                continue;
            }
            for q in crate::grid::neighbors4(p, self.grid_h, self.grid_w) {
                if map[q] != 0 && map[q] != map[p] {
                    return Err(SynthError::InstancesTouch {
                        a: map[p] - 1,
                        b: map[q] - 1,
                        frame,
                    });
                }
            }
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.grid_h * self.grid_w < 4 || self.frames == 0 || self.heads == 0 {
            return bad("need at least a 4-position grid, one frame and one head".into());
        }
        if self.discriminative_head >= self.heads {
            return bad(format!(
                "discriminative head {} >= heads {}",
                self.discriminative_head, self.heads
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        if let Some(counts) = &self.prompt_counts {
            if counts.len() != self.categories.len() || counts.contains(&0) {
                return bad(format!(
                    "prompt_counts needs one count >= 1 per category, got {counts:?}"
                ));
            }
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.cross_peak_head >= self.heads {
                return bad(format!(
                    "category {i} peak head {} >= heads {}",
                    c.cross_peak_head, self.heads
                ));
            }
            if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_lowercase()) {
                return bad(format!(
                    "category name {:?} must be a lowercase word",
                    c.name
                ));
            }
            if self.categories[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("duplicate category {:?}", c.name));
            }
        }
        if self.planted_counts().iter().any(|&k| k > 8) {
            return bad("at most eight instances per category".into());
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.category >= self.categories.len() {
                return bad(format!(
                    "instance {i} has unknown category {}",
                    inst.category
                ));
            }
            if !(inst.intensity > 0.0 && inst.intensity <= 1.0) {
                return bad(format!(
                    "instance {i} intensity {} outside (0, 1]",
                    inst.intensity
                ));
            }
            if !inst
                .center
                .iter()
                .chain(&inst.velocity)
                .all(|v| v.is_finite())
            {
                return bad(format!("instance {i} has a non-finite trajectory"));
            }
        }
        for f in 0..self.frames {
            self.instance_map(f)?;
        }
        Ok(())
    }
}

fn softmax_into(logits: &[f64], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max).exp() / sum) as f32;
    }
}

fn planted_row(
    i: usize,
    map: &[usize],
    inst_sizes: &[usize],
    group_sizes: &[usize; 3],
    bg: usize,
    spec: &SceneSpec,
    out: &mut [f64],
) {
    let n = map.len() as f64;
    let owner = map[i];
    if owner == 0 {
        for (o, &m) in out.iter_mut().zip(map) {
            let on_bg = if m == 0 {
                BACKGROUND_SHARE / bg as f64
            } else {
                0.0
            };
            *o = on_bg + (1.0 - BACKGROUND_SHARE) / n;
        }
        return;
    }
    let inst = owner - 1;
    let g = inst % 3;
    let scale = spec.instances[inst].intensity;
    let (a, b) = (GROUP_SHARE[g] * scale, INSTANCE_SHARE * scale);
    for (o, &m) in out.iter_mut().zip(map) {
        let mut p = (1.0 - a - b) / n;
        if m != 0 && (m - 1) % 3 == g {
            p += a / group_sizes[g] as f64;
        }
        if m == owner {
            p += b / inst_sizes[inst] as f64;
        }
        *o = p;
    }
}

/// Builds the self, cross and pre-softmax bundles and the ground-truth layout.
pub fn synth_scene(spec: &SceneSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let n = spec.positions();
    let prompt = spec.prompt();
    let tokens = tokenize(&prompt);
    let text_len = tokens.len();
    // token column of each category noun; categories appear in order
    let mut token_of = Vec::with_capacity(spec.categories.len());
    for c in &spec.categories {
        let forms = [c.name.clone(), pluralize(&c.name)];
        let t = tokens
            .iter()
            .position(|t| forms.contains(t))
            .ok_or_else(|| {
                SynthError::InvalidSpec(format!("category {:?} missing from prompt", c.name))
            })?;
        token_of.push(t);
    }
    let maps: Vec<Vec<usize>> = (0..spec.frames)
        .map(|f| spec.instance_map(f))
        .collect::<Result<_, _>>()?;
    let meta = BundleMeta {
        timestep: 20,
        layer: 15,
        extra: Default::default(),
    };
    let bundle = |kind, data| AttentionBundle {
        kind,
        frames: spec.frames,
        heads: spec.heads,
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        text_len: if kind == AttentionKind::SelfAttn {
            0
        } else {
            text_len
        },
        tokens: if kind == AttentionKind::SelfAttn {
            Vec::new()
        } else {
            tokens.clone()
        },
        meta: meta.clone(),
        data,
    };

    let mut self_data = vec![0f32; spec.frames * spec.heads * n * n];
    let mut rng = Stream::new(spec.seed, 0);
    let mut logits = vec![0f64; n];
    let mut inst_sizes = vec![0usize; spec.instances.len()];
    for (f, map) in maps.iter().enumerate() {
        inst_sizes.iter_mut().for_each(|s| *s = 0);
        let mut group_sizes = [0usize; 3];
        for &m in map.iter().filter(|&&m| m != 0) {
            inst_sizes[m - 1] += 1;
            group_sizes[(m - 1) % 3] += 1;
        }
        let bg = map.iter().filter(|&&m| m == 0).count();
        for h in 0..spec.heads {
            let start = (f * spec.heads + h) * n * n;
            let matrix = &mut self_data[start..start + n * n];
            for (i, out) in matrix.chunks_exact_mut(n).enumerate() {
                if h == spec.discriminative_head {
                    planted_row(i, map, &inst_sizes, &group_sizes, bg, spec, &mut logits);
                    for l in logits.iter_mut() {
                        *l = l.ln();
                    }
                    if spec.noise_sigma > 0.0 {
                        for l in logits.iter_mut() {
                            *l += spec.noise_sigma * rng.gaussian();
                        }
                    }
                } else {
                    for l in logits.iter_mut() {
                        *l = rng.centered(SELF_DISTRACTOR_SCALE);
                    }
                }
                softmax_into(&logits, out);
            }
        }
    }

    let mut cross_data = vec![0f32; spec.frames * spec.heads * n * text_len];
    let mut pre_data = vec![0f32; cross_data.len()];
    let mut rng = Stream::new(spec.seed, 1);
    let mut row = vec![0f64; text_len];
    for (f, map) in maps.iter().enumerate() {
        for h in 0..spec.heads {
            let planted: Vec<usize> = (0..spec.categories.len())
                .filter(|&c| spec.categories[c].cross_peak_head == h)
                .collect();
            for (i, &cell) in map.iter().enumerate() {
                for l in row.iter_mut() {
                    *l = rng.centered(CROSS_DISTRACTOR_SCALE);
                }
                if !planted.is_empty() {
                    let owner = cell.checked_sub(1).map(|k| &spec.instances[k]);
                    for &c in &planted {
                        row[token_of[c]] += match owner {
                            Some(inst) if inst.category == c => CROSS_BONUS * inst.intensity,
                            _ => -CROSS_BONUS,
                        };
                    }
                    if spec.noise_sigma > 0.0 {
                        for l in row.iter_mut() {
                            *l += spec.noise_sigma * rng.gaussian();
                        }
                    }
                }
                let at = ((f * spec.heads + h) * n + i) * text_len;
                for (o, &l) in pre_data[at..at + text_len].iter_mut().zip(&row) {
                    *o = l as f32;
                }
                softmax_into(&row, &mut cross_data[at..at + text_len]);
            }
        }
    }

    let mut truth = Layout::new(spec.frames, spec.grid_h, spec.grid_w);
    let counts = spec.planted_counts();
    let labels: Vec<u16> = spec
        .categories
        .iter()
        .enumerate()
        .map(|(c, cat)| truth.register(&cat.name, Some(token_of[c]), Some(counts[c])))
        .collect();
    for (f, map) in maps.iter().enumerate() {
        for (p, &m) in map.iter().enumerate() {
            truth.frames[f][p] = if m == 0 {
                BACKGROUND
            } else {
                labels[spec.instances[m - 1].category]
            };
        }
    }

    Ok(SynthScene {
        prompt,
        self_attn: bundle(AttentionKind::SelfAttn, self_data),
        cross_attn: bundle(AttentionKind::CrossAttn, cross_data),
        pre_softmax: bundle(AttentionKind::PreSoftmax, pre_data),
        truth,
    })
}

/// Shape of a random scene; instances are placed by rejection sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneParams {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub heads: usize,
    /// Instances per category.
    pub counts: Vec<u32>,
    pub noise_sigma: f64,
    /// Largest per-frame anchor displacement on each axis.
    pub max_speed: f64,
}

const NOUNS: [&str; 8] = ["cat", "dog", "bird", "cup", "apple", "car", "ball", "book"];
const PLACEMENT_TRIES: usize = 2000;

/// A scene with `params.counts[c]` instances of category `c`, random shapes
/// (3x3 to 4x4 rectangles, radius-2 disks), random planted heads.
pub fn random_scene(params: &RandomSceneParams, seed: u64) -> Result<SceneSpec, SynthError> {
    if params.counts.len() > NOUNS.len() {
        return Err(SynthError::InvalidSpec(format!(
            "at most {} categories",
            NOUNS.len()
        )));
    }
    let mut rng = Stream::new(seed, 2);
    let heads = params.heads.max(1);
    let categories = (0..params.counts.len())
        .map(|c| CategorySpec {
            name: NOUNS[c].to_string(),
            cross_peak_head: rng.range(0, heads - 1),
        })
        .collect();
    let mut spec = SceneSpec {
        grid_h: params.grid_h,
        grid_w: params.grid_w,
        frames: params.frames,
        heads,
        categories,
        instances: Vec::new(),
        noise_sigma: params.noise_sigma,
        discriminative_head: rng.range(0, heads - 1),
        seed,
        prompt_counts: None,
    };
    let wanted: Vec<usize> = params
        .counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k as usize))
        .collect();
    let span = params.frames.saturating_sub(1) as f64;
    for (i, &category) in wanted.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let shape = match rng.range(0, 4) {
                0 => Shape::Disk { radius: 2 },
                k => Shape::Rect {
                    height: 2 + k.div_ceil(2).min(2),
                    width: 3 + (k % 2),
                },
            };
            let velocity = if span > 0.0 {
                [
                    (rng.uniform() * 2.0 - 1.0) * params.max_speed,
                    (rng.uniform() * 2.0 - 1.0) * params.max_speed,
                ]
            } else {
                [0.0, 0.0]
            };
            let center = [
                rng.uniform() * params.grid_h as f64 - 0.5,
                rng.uniform() * params.grid_w as f64 - 0.5,
            ];
            spec.instances.push(InstanceSpec {
                category,
                shape,
                center,
                velocity,
                intensity: 1.0,
            });
            if (0..spec.frames).all(|f| spec.instance_map(f).is_ok()) {
                placed = true;
                break;
            }
            spec.instances.pop();
        }
        if !placed {
            return Err(SynthError::InvalidSpec(format!(
                "could not place instance {i} of {} on a {}x{} grid",
                wanted.len(),
                params.grid_h,
                params.grid_w
            )));
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Ground-truth counts per frame, keyed by category name.
pub fn truth_counts(scene: &SynthScene) -> BTreeMap<String, Vec<usize>> {
    scene
        .truth
        .labels
        .iter()
        .map(|(&label, cat)| {
            (
                cat.name.clone(),
                (0..scene.truth.frame_count())
                    .map(|f| scene.truth.count(label, f))
                    .collect(),
            )
        })
        .collect()
}
