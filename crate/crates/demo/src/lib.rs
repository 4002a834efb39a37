//! Browser demo: build a synthetic scene, find its instance layout, refine it
//! to a prompt and inspect the resulting guidance. All state lives in a
//! [`Session`]; every method returns JSON for the page to draw.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use numina_core::guidance::GuidanceField;
use numina_core::layout::Layout;
use numina_core::pipeline::{self, Identification};
use numina_core::prompt::{parse_count_spec, CountSpec, Lexicon};
use numina_core::refine::{EditOp, RefinedLayout};
use numina_core::synth::{random_scene, synth_scene, RandomSceneParams, SynthScene};
use numina_core::{Error, RunConfig};

/// Scene request from the page.
#[derive(Debug, Clone, Deserialize)]
pub struct SceneRequest {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Planted instances per category.
    pub counts: Vec<u32>,
    /// Counts the prompt claims; defaults to `counts`.
    #[serde(default)]
    pub prompt_counts: Option<Vec<u32>>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    32
}
fn default_frames() -> usize {
    2
}
fn default_heads() -> usize {
    4
}

#[derive(Serialize)]
struct CategoryView {
    category: String,
    label: u16,
    target: u32,
    counts: Vec<usize>,
    mismatch: bool,
}

#[derive(Serialize)]
struct FrameView {
    self_head: usize,
    gray: Vec<f32>,
    layout: Vec<u16>,
    truth: Vec<u16>,
}

#[derive(Serialize)]
struct IdentifyView {
    prompt: String,
    grid_h: usize,
    grid_w: usize,
    planted_head: usize,
    aligned: bool,
    categories: Vec<CategoryView>,
    frames: Vec<FrameView>,
}

#[derive(Serialize)]
struct EditView {
    frame: usize,
    category: String,
    op: &'static str,
    center: [f64; 2],
    area: usize,
}

#[derive(Serialize)]
struct RefineView {
    prompt: String,
    edits: Vec<EditView>,
    counts: Vec<Vec<usize>>,
    /// Per frame: refined labels.
    layouts: Vec<Vec<u16>>,
}

#[derive(Serialize)]
struct SlotView {
    category: String,
    token_index: usize,
    suppressed: usize,
    boosted: usize,
    overwritten: usize,
    /// Per frame: mode per pixel (0 none, 1 suppress, 2 boost, 3 overwrite).
    modes: Vec<Vec<u8>>,
}

#[derive(Serialize)]
struct GuideView {
    fraction: f32,
    total_steps: u32,
    /// δ(t) for every step.
    schedule: Vec<f64>,
    slots: Vec<SlotView>,
}

/// The demo's state, usable without a browser.
pub struct Demo {
    scene: SynthScene,
    planted_head: usize,
    id: Identification,
    cfg: RunConfig,
    refined: Option<(CountSpec, RefinedLayout)>,
}

fn labels_of(layout: &Layout, frame: usize) -> Vec<u16> {
    layout.frames[frame].clone()
}

impl Demo {
    pub fn new(request: &SceneRequest) -> Result<Self, Error> {
        let params = RandomSceneParams {
            grid_h: request.grid,
            grid_w: request.grid,
            frames: request.frames,
            heads: request.heads,
            counts: request.counts.clone(),
            noise_sigma: request.noise,
            max_speed: request.speed,
        };
        let mut spec = random_scene(&params, request.seed)?;
        spec.prompt_counts = request.prompt_counts.clone();
        let scene = synth_scene(&spec)?;
        let cfg = RunConfig::default();
        let id = pipeline::identify(
            &scene.self_attn,
            Some(&scene.cross_attn),
            &scene.prompt,
            &Lexicon::default(),
            &cfg,
        )?;
        Ok(Self {
            scene,
            planted_head: spec.discriminative_head,
            id,
            cfg,
            refined: None,
        })
    }

    pub fn identify_json(&self) -> String {
        let layout = &self.id.layout;
        let view = IdentifyView {
            prompt: self.scene.prompt.clone(),
            grid_h: layout.grid_h,
            grid_w: layout.grid_w,
            planted_head: self.planted_head,
            aligned: self.id.report.aligned,
            categories: self
                .id
                .report
                .categories
                .iter()
                .map(|c| CategoryView {
                    category: c.category.clone(),
                    label: c.label,
                    target: c.target,
                    counts: c.counts.clone(),
                    mismatch: c.mismatch,
                })
                .collect(),
            frames: (0..layout.frame_count())
                .map(|f| FrameView {
                    self_head: self.id.report.heads[f].self_head,
                    gray: self.id.debug[f]
                        .gray
                        .values
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                    layout: labels_of(layout, f),
                    truth: labels_of(&self.scene.truth, f),
                })
                .collect(),
        };
        serde_json::to_string(&view).expect("view serializes")
    }

    /// Refines the identified layout to `prompt`, or to the scene's own
    /// prompt when `prompt` is blank. Token columns stay those of the scene.
    pub fn refine(&mut self, prompt: &str) -> Result<String, Error> {
        let prompt = if prompt.trim().is_empty() {
            self.scene.prompt.as_str()
        } else {
            prompt
        };
        let spec = parse_count_spec(prompt, &Lexicon::default())?;
        let refined = pipeline::refine(self.id.layout.clone(), &spec, &self.cfg)?;
        let layout = &refined.layout;
        let view = RefineView {
            prompt: prompt.to_string(),
            edits: refined
                .edits
                .iter()
                .map(|e| EditView {
                    frame: e.frame,
                    category: e.category.clone(),
                    op: match e.op {
                        EditOp::Add => "add",
                        EditOp::Remove => "remove",
                    },
                    center: e.center,
                    area: e.area,
                })
                .collect(),
            counts: layout.counts(),
            layouts: (0..layout.frame_count())
                .map(|f| labels_of(layout, f))
                .collect(),
        };
        self.refined = Some((spec, refined));
        Ok(serde_json::to_string(&view).expect("view serializes"))
    }

    /// Guidance for the last refinement, using the scene's pre-softmax scores.
    pub fn guide(&self) -> Result<String, Error> {
        let Some((spec, refined)) = &self.refined else {
            return Err(Error::Pipeline(pipeline::PipelineError::BundleMismatch(
                "refine the layout before asking for guidance".into(),
            )));
        };
        let field: GuidanceField =
            pipeline::guide(refined, spec, Some(&self.scene.pre_softmax), &self.cfg)?;
        let schedule = field.schedule();
        let view = GuideView {
            fraction: field.fraction,
            total_steps: field.total_steps,
            schedule: (0..field.total_steps as usize)
                .map(|t| schedule.delta(t))
                .collect(),
            slots: field
                .summary()
                .into_iter()
                .enumerate()
                .map(|(s, sum)| SlotView {
                    category: sum.category,
                    token_index: sum.token_index,
                    suppressed: sum.suppressed,
                    boosted: sum.boosted,
                    overwritten: sum.overwritten,
                    modes: (0..field.frames)
                        .map(|f| field.modes_at(f, s).iter().map(|&m| m as u8).collect())
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&view).expect("view serializes"))
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Browser handle on a [`Demo`].
#[wasm_bindgen]
pub struct Session {
    inner: Demo,
}

#[wasm_bindgen]
impl Session {
    /// Generates the scene described by `request` (JSON) and identifies its layout.
    #[wasm_bindgen(constructor)]
    pub fn new(request: &str) -> Result<Session, JsError> {
        let request: SceneRequest = serde_json::from_str(request).map_err(js_err)?;
        Ok(Session {
            inner: Demo::new(&request).map_err(js_err)?,
        })
    }

    #[wasm_bindgen(js_name = identify)]
    pub fn identify_json(&self) -> String {
        self.inner.identify_json()
    }

    pub fn refine(&mut self, prompt: &str) -> Result<String, JsError> {
        self.inner.refine(prompt).map_err(js_err)
    }

    pub fn guide(&self) -> Result<String, JsError> {
        self.inner.guide().map_err(js_err)
    }
}
