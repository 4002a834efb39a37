//! `numina`: identify count mismatches in dumped attention, refine the layout
//! and emit guidance for regeneration.
//!
//! Exit codes: 0 success (identify: counts aligned), 3 identify found a
//! mismatch, 2 usage or precondition error, 4 no valid placement during
//! refinement, 5 pre-softmax scores missing for guidance, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use numina_core::bundle::read_bundle;
use numina_core::config::{Auto, ConfigError, RunConfig};
use numina_core::debug::write_debug;
use numina_core::guidance::{write_field, GuidanceError};
use numina_core::layout::{read_layout, write_layout};
use numina_core::metrics::evaluate;
use numina_core::pipeline::{self, spec_from_layout, PipelineError};
use numina_core::prompt::{parse_count_spec, Lexicon, PromptError};
use numina_core::record::read_records;
use numina_core::refine::{EditLog, RefineError, RefinedLayout};
use numina_core::synth::{synth_scene, SceneSpec};

const EXIT_MISALIGNED: u8 = 3;
const EXIT_USAGE: u8 = 2;
const EXIT_NO_PLACEMENT: u8 = 4;
const EXIT_MISSING_SCORES: u8 = 5;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(
    name = "numina",
    version,
    about = "Count-aware layout guidance for text-to-video attention"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides on top of the config file (`--config`, else `$NUMINA_CONFIG`,
/// else built-in defaults).
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; falls back to $NUMINA_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Minimum overlap score for a region to count.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Temporal weight of the placement cost.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Boost for circle-template additions.
    #[arg(long, global = true)]
    k: Option<f64>,
    /// Focus-mask threshold as a fraction of the cross-attention peak.
    #[arg(long, global = true)]
    peak_ratio: Option<f64>,
    /// Edge-clarity weight in head scores.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    block: Option<usize>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    min_pts: Option<usize>,
    /// Mean-shift bandwidth, or "auto".
    #[arg(long, global = true)]
    bandwidth: Option<Auto<f64>>,
    /// Placement grid spacing.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Circle template radius, or "auto".
    #[arg(long, global = true)]
    radius: Option<Auto<usize>>,
    /// Logit bias on removed pixels.
    #[arg(long, global = true, allow_hyphen_values = true)]
    neg_const: Option<f64>,
    /// Share of denoising steps that are guided.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Total denoising steps of the guided run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    timestep: Option<u32>,
    #[arg(long, global = true)]
    layer: Option<u32>,
    /// Seed; for `synth`, overrides the spec's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write grayscale maps, scores, cross maps and masks here.
    #[arg(long, global = true, value_name = "PATH")]
    debug_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_env()?,
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        apply!(
            tau => tau, lambda => lambda, k => k, peak_ratio => peak_ratio, gamma => gamma,
            block => block, eps => eps, min_pts => min_pts, bandwidth => bandwidth,
            stride => stride, radius => radius, neg_const => neg_const, fraction => fraction,
            steps => total_steps, timestep => timestep, layer => layer, seed => seed,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build per-frame layouts from attention bundles and compare counts with the prompt.
    Identify {
        /// Self-attention bundle (ATNB).
        #[arg(long = "self", value_name = "PATH")]
        self_path: PathBuf,
        /// Cross-attention bundle; required when the prompt counts more than one noun.
        #[arg(long = "cross", value_name = "PATH")]
        cross_path: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Edit a layout until every frame holds the prompted counts.
    Refine {
        #[arg(long, value_name = "PATH")]
        layout: PathBuf,
        /// Defaults to the targets recorded in the layout.
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Turn a refined layout and its edit log into a guidance field.
    Guide {
        /// Refined layout written by `refine`.
        #[arg(long, value_name = "PATH")]
        refined: PathBuf,
        /// Edit log; defaults to edits.json next to the refined layout.
        #[arg(long, value_name = "PATH")]
        edits: Option<PathBuf>,
        /// Pre-softmax cross-attention scores, needed for copied-region additions.
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Count accuracy and temporal consistency over detector count records.
    Eval {
        /// JSON array of count records.
        #[arg(long, value_name = "PATH")]
        counts: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate synthetic bundles with planted ground truth from a scene spec.
    Synth {
        /// SceneSpec JSON.
        #[arg(long, value_name = "PATH")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LexiconArg {
    /// JSON object of extra number words, e.g. {"dozen": 12}.
    #[arg(long, value_name = "PATH")]
    lexicon: Option<PathBuf>,
}

impl LexiconArg {
    fn load(&self) -> Result<Lexicon> {
        let Some(path) = &self.lexicon else {
            return Ok(Lexicon::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Lexicon::from_json(&text)?)
    }
}

fn out_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.echo(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn identify(
    cfg: &RunConfig,
    debug_dir: Option<&Path>,
    self_path: &Path,
    cross_path: Option<&Path>,
    prompt: &str,
    lexicon: &Lexicon,
    out: &Path,
) -> Result<u8> {
    let self_attn =
        read_bundle(self_path).with_context(|| format!("reading {}", self_path.display()))?;
    let cross = cross_path
        .map(|p| read_bundle(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let id = pipeline::identify(&self_attn, cross.as_ref(), prompt, lexicon, cfg)?;
    out_dir(out, cfg)?;
    write_layout(&id.layout, out.join("layout.nlay"))?;
    write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&id.report)?,
    )?;
    if let Some(dir) = debug_dir {
        write_debug(dir, &id)?;
    }
    for c in &id.report.categories {
        let status = if c.mismatch { "MISMATCH" } else { "ok" };
        println!(
            "{}: target {} counts {:?} {status}",
            c.category, c.target, c.counts
        );
    }
    Ok(if id.report.aligned {
        0
    } else {
        EXIT_MISALIGNED
    })
}

fn refine(
    cfg: &RunConfig,
    layout_path: &Path,
    prompt: Option<&str>,
    lexicon: &Lexicon,
    out: &Path,
) -> Result<u8> {
    let layout =
        read_layout(layout_path).with_context(|| format!("reading {}", layout_path.display()))?;
    let spec = match prompt {
        Some(p) => parse_count_spec(p, lexicon)?,
        None => spec_from_layout(&layout),
    };
    if spec.entries.is_empty() {
        anyhow::bail!(PromptError::NoCountableNoun);
    }
    let refined = pipeline::refine(layout, &spec, cfg)?;
    out_dir(out, cfg)?;
    write_layout(&refined.layout, out.join("refined.nlay"))?;
    write_layout(&refined.delta_layout(), out.join("deltas.nlay"))?;
    refined.edit_log().write(out.join("edits.json"))?;
    let (adds, removes) = refined.edits.iter().fold((0, 0), |(a, r), e| match e.op {
        numina_core::refine::EditOp::Add => (a + 1, r),
        numina_core::refine::EditOp::Remove => (a, r + 1),
    });
    println!(
        "{} edits: {adds} added, {removes} removed",
        refined.edits.len()
    );
    Ok(0)
}

fn guide(
    cfg: &RunConfig,
    refined_path: &Path,
    edits: Option<&Path>,
    scores: Option<&Path>,
    out: &Path,
) -> Result<u8> {
    let layout =
        read_layout(refined_path).with_context(|| format!("reading {}", refined_path.display()))?;
    let edits_path = edits.map(Path::to_path_buf).unwrap_or_else(|| {
        refined_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("edits.json")
    });
    let log =
        EditLog::read(&edits_path).with_context(|| format!("reading {}", edits_path.display()))?;
    let refined = RefinedLayout::from_parts(layout, log.edits)?;
    let scores = scores
        .map(|p| read_bundle(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let spec = spec_from_layout(&refined.layout);
    let field = pipeline::guide(&refined, &spec, scores.as_ref(), cfg)?;
    out_dir(out, cfg)?;
    write_field(&field, out.join("guidance.ngdf"))?;
    for s in field.summary() {
        println!(
            "{} (token {}): {} suppressed, {} boosted, {} overwritten",
            s.category, s.token_index, s.suppressed, s.boosted, s.overwritten
        );
    }
    Ok(0)
}

fn eval(cfg: &RunConfig, counts: &Path, out: &Path) -> Result<u8> {
    let records = read_records(counts).with_context(|| format!("reading {}", counts.display()))?;
    let report = evaluate(&records)?;
    out_dir(out, cfg)?;
    write_text(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    match report.tc {
        Some(tc) => println!(
            "CountAcc {:.4}  TC {tc:.4}  ({} records)",
            report.count_acc, report.records
        ),
        None => println!(
            "CountAcc {:.4}  TC n/a  ({} records)",
            report.count_acc, report.records
        ),
    }
    Ok(0)
}

fn synth(cfg: &RunConfig, seed: Option<u64>, spec_path: &Path, out: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec: SceneSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let scene = synth_scene(&spec)?;
    out_dir(out, cfg)?;
    numina_core::bundle::write_bundle(&scene.self_attn, out.join("self.atnb"))?;
    numina_core::bundle::write_bundle(&scene.cross_attn, out.join("cross.atnb"))?;
    numina_core::bundle::write_bundle(&scene.pre_softmax, out.join("presoftmax.atnb"))?;
    write_layout(&scene.truth, out.join("truth.nlay"))?;
    write_text(&out.join("prompt.txt"), &format!("{}\n", scene.prompt))?;
    write_text(
        &out.join("scene.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    println!("{}", scene.prompt);
    Ok(0)
}

/// Maps an error to the exit-code protocol.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::Refine(RefineError::NoValidPlacement { .. }) => {
                    return EXIT_NO_PLACEMENT
                }
                PipelineError::Guidance(GuidanceError::MissingScores) => {
                    return EXIT_MISSING_SCORES
                }
                PipelineError::Config(_)
                | PipelineError::Prompt(_)
                | PipelineError::MissingCross(_)
                | PipelineError::BundleMismatch(_) => return EXIT_USAGE,
                _ => {}
            }
        }
        if let Some(RefineError::NoValidPlacement { .. }) = cause.downcast_ref::<RefineError>() {
            return EXIT_NO_PLACEMENT;
        }
        if let Some(GuidanceError::MissingScores) = cause.downcast_ref::<GuidanceError>() {
            return EXIT_MISSING_SCORES;
        }
        if cause.is::<ConfigError>() || cause.is::<PromptError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_OTHER
}

/// The error chain on one line, skipping causes the previous message
/// already spells out.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = cli.config.resolve()?;
    let debug_dir = cli.config.debug_dir.as_deref();
    match cli.command {
        Command::Identify {
            self_path,
            cross_path,
            prompt,
            lexicon,
            out,
        } => identify(
            &cfg,
            debug_dir,
            &self_path,
            cross_path.as_deref(),
            &prompt,
            &lexicon.load()?,
            &out,
        ),
        Command::Refine {
            layout,
            prompt,
            lexicon,
            out,
        } => refine(&cfg, &layout, prompt.as_deref(), &lexicon.load()?, &out),
        Command::Guide {
            refined,
            edits,
            scores,
            out,
        } => guide(&cfg, &refined, edits.as_deref(), scores.as_deref(), &out),
        Command::Eval { counts, out } => eval(&cfg, &counts, &out),
        Command::Synth { spec, out } => synth(&cfg, cli.config.seed, &spec, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
