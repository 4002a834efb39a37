//! Inspection dumps for an identify run: every self head's grayscale map and
//! score, the chosen cross-attention maps and focus masks, and the layout, as
//! PGM images plus JSON.
//!
//! Layout under the target directory:
//!
//! ```text
//! frame_000/head_00.pgm ...     grayscale map of every self head
//! frame_000/scores.json         {"selected": h, "scores": [HeadScore, ...]}
//! frame_000/cross_<noun>.pgm    chosen cross head's map, scaled by its peak
//! frame_000/mask_<noun>.pgm     focus mask
//! frame_000/layout.pgm          label grid, background black
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::grid::{encode_pgm, ScalarMap};
use crate::heads::HeadScore;
use crate::layout::{FocusMask, Layout};
use crate::pipeline::Identification;

#[derive(Debug, thiserror::Error)]
pub enum DebugError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DebugError> {
    std::fs::write(path, bytes).map_err(|source| DebugError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), DebugError> {
    std::fs::create_dir_all(path).map_err(|source| DebugError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Keeps file names portable whatever the noun looks like.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn peak_scaled(map: &ScalarMap) -> ScalarMap {
    let peak = map.max();
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    ScalarMap::new(
        map.grid_h,
        map.grid_w,
        map.values.iter().map(|v| v * scale).collect(),
    )
}

fn mask_map(mask: &FocusMask) -> ScalarMap {
    ScalarMap::new(
        mask.grid_h,
        mask.grid_w,
        mask.mask
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    )
}

fn layout_map(layout: &Layout, frame: usize) -> ScalarMap {
    let labels = &layout.frames[frame];
    let top = labels.iter().copied().max().unwrap_or(0).max(1) as f64;
    ScalarMap::new(
        layout.grid_h,
        layout.grid_w,
        labels.iter().map(|&l| l as f64 / top).collect(),
    )
}

#[derive(Serialize)]
struct FrameScores<'a> {
    selected: usize,
    scores: &'a [HeadScore],
}

/// Writes the dump for `id` under `dir` and returns the files written.
pub fn write_debug(dir: impl AsRef<Path>, id: &Identification) -> Result<Vec<PathBuf>, DebugError> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<(), DebugError> {
        write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    for (f, (dbg, heads)) in id.debug.iter().zip(&id.report.heads).enumerate() {
        let frame_dir = dir.as_ref().join(format!("frame_{f:03}"));
        mkdir(&frame_dir)?;
        for (h, map) in dbg.head_maps.iter().enumerate() {
            put(frame_dir.join(format!("head_{h:02}.pgm")), &encode_pgm(map))?;
        }
        let scores = FrameScores {
            selected: heads.self_head,
            scores: &heads.scores,
        };
        let json = serde_json::to_string_pretty(&scores).expect("scores serialize");
        put(frame_dir.join("scores.json"), json.as_bytes())?;
        for (entry, cross) in id.spec.entries.iter().zip(&dbg.cross) {
            if let Some((map, mask)) = cross {
                let stem = file_stem(&entry.canonical);
                put(
                    frame_dir.join(format!("cross_{stem}.pgm")),
                    &encode_pgm(&peak_scaled(map)),
                )?;
                put(
                    frame_dir.join(format!("mask_{stem}.pgm")),
                    &encode_pgm(&mask_map(mask)),
                )?;
            }
        }
        put(
            frame_dir.join("layout.pgm"),
            &encode_pgm(&layout_map(&id.layout, f)),
        )?;
    }
    Ok(written)
}
