//! NLAY layout files: 20-byte header, u16 label grids, JSON trailer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Category, Layout, LayoutError, BACKGROUND};
use crate::bundle::Cursor;

pub const NLAY_MAGIC: &[u8; 4] = b"NLAY";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    labels: BTreeMap<u16, String>,
    #[serde(default)]
    counts: Vec<Vec<usize>>,
    #[serde(default)]
    targets: BTreeMap<String, u32>,
    #[serde(default)]
    tokens: BTreeMap<String, usize>,
}

fn malformed(msg: impl Into<String>) -> LayoutError {
    LayoutError::Malformed(msg.into())
}

pub fn encode_layout(layout: &Layout) -> Result<Vec<u8>, LayoutError> {
    let n = layout.positions();
    if let Some(f) = layout.frames.iter().position(|g| g.len() != n) {
        return Err(LayoutError::GridMismatch(format!(
            "frame {f} has the wrong number of cells"
        )));
    }
    let mut out = Vec::with_capacity(20 + layout.frames.len() * n * 2 + 256);
    out.extend_from_slice(NLAY_MAGIC);
    for v in [
        VERSION,
        layout.frames.len() as u32,
        layout.grid_h as u32,
        layout.grid_w as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for grid in &layout.frames {
        for &l in grid {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    let trailer = Trailer {
        labels: layout
            .labels
            .iter()
            .map(|(&l, c)| (l, c.name.clone()))
            .collect(),
        counts: layout.counts(),
        targets: layout
            .labels
            .values()
            .filter_map(|c| Some((c.name.clone(), c.target?)))
            .collect(),
        tokens: layout
            .labels
            .values()
            .filter_map(|c| Some((c.name.clone(), c.token_index?)))
            .collect(),
    };
    let json = serde_json::to_vec(&trailer).map_err(|e| malformed(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_layout(bytes: &[u8]) -> Result<Layout, LayoutError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .take(4)
        .ok_or_else(|| malformed("file ends inside magic"))?;
    if magic != NLAY_MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(LayoutError::BadMagic(m));
    }
    let mut header = [0u32; 4];
    for v in header.iter_mut() {
        *v = cur
            .u32()
            .ok_or_else(|| malformed("file ends inside header"))?;
    }
    let [version, frames, grid_h, grid_w] = header.map(|v| v as usize);
    if version as u32 != VERSION {
        return Err(LayoutError::UnsupportedVersion(version as u32));
    }
    let n = grid_h
        .checked_mul(grid_w)
        .ok_or_else(|| malformed("grid too large"))?;
    let payload = n
        .checked_mul(frames)
        .and_then(|c| c.checked_mul(2))
        .ok_or_else(|| malformed("grid too large"))?;
    let raw = cur
        .take(payload)
        .ok_or_else(|| malformed("file ends inside label payload"))?;
    let cells: Vec<u16> = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let len = cur
        .u64()
        .ok_or_else(|| malformed("missing trailer length"))? as usize;
    if cur.remaining() != len {
        return Err(malformed(format!(
            "trailer length {len} but {} bytes remain",
            cur.remaining()
        )));
    }
    let trailer: Trailer =
        serde_json::from_slice(cur.take(len).unwrap()).map_err(|e| malformed(e.to_string()))?;
    if trailer.labels.contains_key(&BACKGROUND) {
        return Err(malformed("label 0 is reserved for background"));
    }

    let mut layout = Layout::new(0, grid_h, grid_w);
    layout.frames = if n == 0 {
        vec![Vec::new(); frames]
    } else {
        cells.chunks_exact(n).map(<[u16]>::to_vec).collect()
    };
    for (label, name) in trailer.labels {
        let cat = Category {
            target: trailer.targets.get(&name).copied(),
            token_index: trailer.tokens.get(&name).copied(),
            name,
        };
        layout.labels.insert(label, cat);
    }
    for (f, grid) in layout.frames.iter().enumerate() {
        if let Some(&l) = grid
            .iter()
            .find(|&&l| l != BACKGROUND && !layout.labels.contains_key(&l))
        {
            return Err(malformed(format!("frame {f} uses unregistered label {l}")));
        }
    }
    Ok(layout)
}

pub fn read_layout(path: impl AsRef<Path>) -> Result<Layout, LayoutError> {
    decode_layout(&std::fs::read(path)?)
}

pub fn write_layout(layout: &Layout, path: impl AsRef<Path>) -> Result<(), LayoutError> {
    std::fs::write(path, encode_layout(layout)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Layout {
        let mut l = Layout::new(2, 3, 4);
        let cat = l.register("cat", Some(2), Some(2));
        let dog = l.register("dog", Some(5), None);
        l.frames[0][0] = cat;
        l.frames[0][11] = cat;
        l.frames[1][5] = dog;
        l
    }

    #[test]
    fn round_trip_and_trailer() {
        let l = sample();
        let bytes = encode_layout(&l).unwrap();
        assert_eq!(&bytes[..4], b"NLAY");
        let back = decode_layout(&bytes).unwrap();
        assert_eq!(back, l);
        assert_eq!(encode_layout(&back).unwrap(), bytes);
        let json: serde_json::Value = serde_json::from_slice(&bytes[20 + 2 * 24 + 8..]).unwrap();
        assert_eq!(json["labels"]["1"], "cat");
        assert_eq!(json["counts"], serde_json::json!([[2, 0], [0, 1]]));
        assert_eq!(json["targets"], serde_json::json!({"cat": 2}));
    }

    #[test]
    fn rejects_unregistered_label() {
        let mut l = sample();
        l.frames[1][0] = 7;
        let bytes = encode_layout(&l).unwrap();
        assert!(matches!(
            decode_layout(&bytes),
            Err(LayoutError::Malformed(_))
        ));
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let bytes = encode_layout(&sample()).unwrap();
        assert!(decode_layout(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_layout(&bytes[..30]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_layout(&bad), Err(LayoutError::BadMagic(_))));
    }
}
