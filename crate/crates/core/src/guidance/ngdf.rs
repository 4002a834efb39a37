//! NGDF guidance files: 40-byte header, per (frame, slot) u8 mode and f32 base
//! grids, JSON trailer naming the token of each slot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GuidanceError, GuidanceField, GuidanceMode, TokenSlot};
use crate::bundle::Cursor;

pub const NGDF_MAGIC: &[u8; 4] = b"NGDF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    slots: Vec<TokenSlot>,
}

fn malformed(msg: impl Into<String>) -> GuidanceError {
    GuidanceError::Malformed(msg.into())
}

pub fn encode_field(field: &GuidanceField) -> Result<Vec<u8>, GuidanceError> {
    let n = field.positions();
    let expected = field.frames * field.slots.len() * n;
    if field.modes.len() != expected || field.base.len() != expected {
        return Err(GuidanceError::DimMismatch(format!(
            "field holds {} modes and {} bases, expected {expected}",
            field.modes.len(),
            field.base.len()
        )));
    }
    let mut out = Vec::with_capacity(40 + expected * 5 + 128);
    out.extend_from_slice(NGDF_MAGIC);
    for v in [
        VERSION,
        field.frames as u32,
        field.grid_h as u32,
        field.grid_w as u32,
        field.slots.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [field.neg_const, field.k, field.fraction] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&field.total_steps.to_le_bytes());
    for f in 0..field.frames {
        for s in 0..field.slots.len() {
            out.extend(field.modes_at(f, s).iter().map(|&m| m as u8));
            for b in field.base_at(f, s) {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    let json = serde_json::to_vec(&Trailer {
        slots: field.slots.clone(),
    })
    .map_err(|e| malformed(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_field(bytes: &[u8]) -> Result<GuidanceField, GuidanceError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .take(4)
        .ok_or_else(|| malformed("file ends inside magic"))?;
    if magic != NGDF_MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(GuidanceError::BadMagic(m));
    }
    let short = || malformed("file ends inside header");
    let version = cur.u32().ok_or_else(short)?;
    if version != VERSION {
        return Err(GuidanceError::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = cur.u32().ok_or_else(short)? as usize;
    }
    let [frames, grid_h, grid_w, n_slots] = dims;
    let neg_const = cur.f32().ok_or_else(short)?;
    let k = cur.f32().ok_or_else(short)?;
    let fraction = cur.f32().ok_or_else(short)?;
    let total_steps = cur.u32().ok_or_else(short)?;

    let n = grid_h
        .checked_mul(grid_w)
        .ok_or_else(|| malformed("grid too large"))?;
    let cells = n
        .checked_mul(frames)
        .and_then(|c| c.checked_mul(n_slots))
        .ok_or_else(|| malformed("field too large"))?;
    if cells.checked_mul(5).is_none_or(|b| b > cur.remaining()) {
        return Err(malformed("file ends inside field payload"));
    }
    let mut modes = Vec::with_capacity(cells);
    let mut base = Vec::with_capacity(cells);
    for _ in 0..frames * n_slots {
        for &m in cur.take(n).unwrap() {
            modes.push(
                GuidanceMode::from_u8(m).ok_or_else(|| malformed(format!("unknown mode {m}")))?,
            );
        }
        for _ in 0..n {
            base.push(cur.f32().unwrap());
        }
    }
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
    if trailer.slots.len() != n_slots {
        return Err(malformed(format!(
            "header has {n_slots} token slots, trailer {}",
            trailer.slots.len()
        )));
    }
    Ok(GuidanceField {
        frames,
        grid_h,
        grid_w,
        slots: trailer.slots,
        neg_const,
        k,
        fraction,
        total_steps,
        modes,
        base,
    })
}

pub fn read_field(path: impl AsRef<Path>) -> Result<GuidanceField, GuidanceError> {
    decode_field(&std::fs::read(path)?)
}

pub fn write_field(field: &GuidanceField, path: impl AsRef<Path>) -> Result<(), GuidanceError> {
    std::fs::write(path, encode_field(field)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let slots = vec![
            TokenSlot {
                category: "cat".into(),
                token_index: 2,
            },
            TokenSlot {
                category: "dog".into(),
                token_index: 5,
            },
        ];
        let mut field = GuidanceField::empty(2, 3, 4, slots);
        field.set(1, 1, 7, GuidanceMode::Overwrite, 0.625);
        field.set(0, 0, 0, GuidanceMode::Suppress, -1e4);
        let bytes = encode_field(&field).unwrap();
        let trailer_len = u64::from_le_bytes(bytes[280..288].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 40 + 2 * 2 * 12 * 5 + 8 + trailer_len);
        assert_eq!(&bytes[..4], b"NGDF");
        let back = decode_field(&bytes).unwrap();
        assert_eq!(back, field);
        assert_eq!(encode_field(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_mode_and_truncation() {
        let field = GuidanceField::empty(
            1,
            2,
            2,
            vec![TokenSlot {
                category: "cat".into(),
                token_index: 1,
            }],
        );
        let mut bytes = encode_field(&field).unwrap();
        assert!(decode_field(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_field(&bytes[..41]).is_err());
        bytes[40] = 9;
        assert!(matches!(
            decode_field(&bytes),
            Err(GuidanceError::Malformed(_))
        ));
    }
}
