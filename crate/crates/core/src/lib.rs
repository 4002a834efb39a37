//! Count-faithful layout planning for text-to-video attention: choose instance
//! heads, build countable layouts, refine them to the prompted counts and turn
//! the edits into attention guidance.
//!
//! The usual flow is [`pipeline::identify`] on dumped attention bundles, then
//! [`pipeline::refine`] and [`pipeline::guide`]. Every stage also has a file
//! format (ATNB bundles, NLAY layouts, NGDF guidance fields) so the stages can
//! run as separate processes.

// `!(x > 0.0)` style checks are there to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod config;
pub mod debug;
pub mod grid;
pub mod guidance;
pub mod heads;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod record;
pub mod refine;
pub mod synth;

pub use bundle::{AttentionBundle, AttentionKind, BundleError};
pub use config::{ConfigError, RunConfig};
pub use guidance::{GuidanceError, GuidanceField};
pub use layout::{Layout, LayoutError};
pub use pipeline::{Identification, PipelineError};
pub use prompt::{CountSpec, Lexicon, PromptError};
pub use record::CountRecord;
pub use refine::{RefineError, RefinedLayout};

/// Any error the crate can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Record(#[from] record::RecordError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Debug(#[from] debug::DebugError),
}
