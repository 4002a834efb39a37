//! Attention tensor bundles and the ATNB v1 container.
//!
//! Layout of an ATNB file (all integers little-endian):
//!
//! ```text
//! "ATNB" | u32 version=1 | u8 kind | 3 pad bytes
//! u32 frames | u32 heads | u32 grid_h | u32 grid_w | u32 text_len | u32 timestep | u32 layer
//! f32 payload, row-major [frames, heads, N, cols]
//! u64 trailer_len | trailer_len bytes of UTF-8 JSON {"tokens": [...], "meta": {...}}
//! ```
//!
//! `cols` is `N = grid_h * grid_w` for self-attention, `text_len` for
//! cross-attention, and for pre-softmax scores `text_len` when it is non-zero
//! (cross-attention logits) or `N` otherwise.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const MAGIC: &[u8; 4] = b"ATNB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
/// Allowed deviation of a softmax row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"ATNB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported ATNB version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown attention kind tag {0}")]
    UnknownKind(u8),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at frame {frame}, head {head}, row {row}, col {col}")]
    NonFinite {
        frame: usize,
        head: usize,
        row: usize,
        col: usize,
    },
    #[error("malformed trailer: {0}")]
    Trailer(String),
    #[error("invalid bundle:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttn,
    CrossAttn,
    PreSoftmax,
}

impl AttentionKind {
    pub fn tag(self) -> u8 {
        match self {
            AttentionKind::SelfAttn => 0,
            AttentionKind::CrossAttn => 1,
            AttentionKind::PreSoftmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, BundleError> {
        match tag {
            0 => Ok(AttentionKind::SelfAttn),
            1 => Ok(AttentionKind::CrossAttn),
            2 => Ok(AttentionKind::PreSoftmax),
            other => Err(BundleError::UnknownKind(other)),
        }
    }

    fn normalized(self) -> bool {
        !matches!(self, AttentionKind::PreSoftmax)
    }
}

/// Where in the denoising trajectory the bundle was captured, plus any extra
/// key/value pairs the capturing side wants to keep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleMeta {
    pub timestep: u32,
    pub layer: u32,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub kind: AttentionKind,
    pub frames: usize,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_len: usize,
    pub tokens: Vec<String>,
    pub meta: BundleMeta,
    pub data: Vec<f32>,
}

impl AttentionBundle {
    /// Number of latent positions N.
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Row length of each per-(frame, head) matrix.
    pub fn cols(&self) -> usize {
        match self.kind {
            AttentionKind::SelfAttn => self.positions(),
            AttentionKind::CrossAttn => self.text_len,
            AttentionKind::PreSoftmax if self.text_len > 0 => self.text_len,
            AttentionKind::PreSoftmax => self.positions(),
        }
    }

    pub fn matrix_len(&self) -> usize {
        self.positions() * self.cols()
    }

    pub fn expected_len(&self) -> usize {
        self.frames * self.heads * self.matrix_len()
    }

    /// The N×cols matrix of one (frame, head).
    pub fn matrix(&self, frame: usize, head: usize) -> &[f32] {
        let len = self.matrix_len();
        let start = (frame * self.heads + head) * len;
        &self.data[start..start + len]
    }

    pub fn matrix_mut(&mut self, frame: usize, head: usize) -> &mut [f32] {
        let len = self.matrix_len();
        let start = (frame * self.heads + head) * len;
        &mut self.data[start..start + len]
    }

    pub fn row(&self, frame: usize, head: usize, row: usize) -> &[f32] {
        let cols = self.cols();
        &self.matrix(frame, head)[row * cols..(row + 1) * cols]
    }

    pub fn validate(&self) -> ValidationReport {
        validate_bundle(self)
    }
}

/// One violated bundle invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    ZeroDimension {
        field: &'static str,
    },
    PayloadLength {
        expected: usize,
        actual: usize,
    },
    TokenCount {
        expected: usize,
        actual: usize,
    },
    TextLenOnSelfAttention {
        text_len: usize,
    },
    NonFinite {
        frame: usize,
        head: usize,
        row: usize,
        col: usize,
    },
    RowSum {
        frame: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension { field } => write!(f, "{field} must be at least 1"),
            Violation::PayloadLength { expected, actual } => {
                write!(
                    f,
                    "payload holds {actual} values, shape requires {expected}"
                )
            }
            Violation::TokenCount { expected, actual } => {
                write!(f, "{actual} tokens listed, text_len is {expected}")
            }
            Violation::TextLenOnSelfAttention { text_len } => {
                write!(f, "self-attention bundle declares text_len {text_len}")
            }
            Violation::NonFinite {
                frame,
                head,
                row,
                col,
            } => {
                write!(
                    f,
                    "non-finite value at frame {frame}, head {head}, row {row}, col {col}"
                )
            }
            Violation::RowSum {
                frame,
                head,
                row,
                sum,
            } => {
                write!(
                    f,
                    "row sum {sum} at frame {frame}, head {head}, row {row} is not 1"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Lists every violated invariant. An empty report means the bundle is valid.
pub fn validate_bundle(bundle: &AttentionBundle) -> ValidationReport {
    let mut violations = Vec::new();
    for (field, value) in [
        ("frames", bundle.frames),
        ("heads", bundle.heads),
        ("grid_h", bundle.grid_h),
        ("grid_w", bundle.grid_w),
    ] {
        if value == 0 {
            violations.push(Violation::ZeroDimension { field });
        }
    }
    match bundle.kind {
        AttentionKind::SelfAttn if bundle.text_len != 0 => {
            violations.push(Violation::TextLenOnSelfAttention {
                text_len: bundle.text_len,
            });
        }
        AttentionKind::CrossAttn if bundle.text_len == 0 => {
            violations.push(Violation::ZeroDimension { field: "text_len" });
        }
        _ => {}
    }
    let expected_tokens = match bundle.kind {
        AttentionKind::SelfAttn => 0,
        _ => bundle.text_len,
    };
    if bundle.tokens.len() != expected_tokens {
        violations.push(Violation::TokenCount {
            expected: expected_tokens,
            actual: bundle.tokens.len(),
        });
    }
    let expected = bundle.expected_len();
    if bundle.data.len() != expected {
        violations.push(Violation::PayloadLength {
            expected,
            actual: bundle.data.len(),
        });
    }
    // Element checks only make sense once the shape is consistent.
    if !violations.is_empty() || expected == 0 {
        return ValidationReport { violations };
    }

    let cols = bundle.cols();
    for frame in 0..bundle.frames {
        for head in 0..bundle.heads {
            let m = bundle.matrix(frame, head);
            for (row, values) in m.chunks_exact(cols).enumerate() {
                let mut finite = true;
                for (col, v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        violations.push(Violation::NonFinite {
                            frame,
                            head,
                            row,
                            col,
                        });
                        finite = false;
                    }
                }
                if finite && bundle.kind.normalized() {
                    let sum: f64 = values.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        violations.push(Violation::RowSum {
                            frame,
                            head,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    tokens: Vec<String>,
    meta: Map<String, Value>,
}

fn to_u32(value: usize, what: &str) -> Result<u32, BundleError> {
    u32::try_from(value)
        .map_err(|_| BundleError::DimensionMismatch(format!("{what} {value} exceeds u32")))
}

/// Serializes a valid bundle to ATNB bytes.
pub fn encode_bundle(bundle: &AttentionBundle) -> Result<Vec<u8>, BundleError> {
    let report = validate_bundle(bundle);
    if !report.is_empty() {
        return Err(BundleError::Invalid(report));
    }
    let mut meta = bundle.meta.extra.clone();
    meta.remove("timestep");
    meta.remove("layer");
    meta.insert("timestep".into(), Value::from(bundle.meta.timestep));
    meta.insert("layer".into(), Value::from(bundle.meta.layer));
    let trailer = serde_json::to_vec(&Trailer {
        tokens: bundle.tokens.clone(),
        meta,
    })
    .map_err(|e| BundleError::Trailer(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + bundle.data.len() * 4 + 8 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(bundle.kind.tag());
    out.extend_from_slice(&[0; 3]);
    for (value, what) in [
        (bundle.frames, "frames"),
        (bundle.heads, "heads"),
        (bundle.grid_h, "grid_h"),
        (bundle.grid_w, "grid_w"),
        (bundle.text_len, "text_len"),
    ] {
        out.extend_from_slice(&to_u32(value, what)?.to_le_bytes());
    }
    out.extend_from_slice(&bundle.meta.timestep.to_le_bytes());
    out.extend_from_slice(&bundle.meta.layer.to_le_bytes());
    for v in &bundle.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn short(what: &str) -> BundleError {
    BundleError::DimensionMismatch(format!("file ends inside {what}"))
}

/// Parses ATNB bytes and checks every bundle invariant.
pub fn decode_bundle(bytes: &[u8]) -> Result<AttentionBundle, BundleError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).ok_or_else(|| short("magic"))?;
    if magic != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(BundleError::BadMagic(m));
    }
    let version = cur.u32().ok_or_else(|| short("header"))?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let kind_pad = cur.take(4).ok_or_else(|| short("header"))?;
    let kind = AttentionKind::from_tag(kind_pad[0])?;
    let mut dims = [0u32; 7];
    for d in dims.iter_mut() {
        *d = cur.u32().ok_or_else(|| short("header"))?;
    }
    let [frames, heads, grid_h, grid_w, text_len, timestep, layer] = dims;
    let mut bundle = AttentionBundle {
        kind,
        frames: frames as usize,
        heads: heads as usize,
        grid_h: grid_h as usize,
        grid_w: grid_w as usize,
        text_len: text_len as usize,
        tokens: Vec::new(),
        meta: BundleMeta {
            timestep,
            layer,
            extra: Map::new(),
        },
        data: Vec::new(),
    };
    let values = (bundle.frames as u128) * (bundle.heads as u128) * (bundle.matrix_len() as u128);
    let payload_bytes = values * 4;
    if payload_bytes + 8 > cur.remaining() as u128 {
        return Err(BundleError::DimensionMismatch(format!(
            "header declares {values} payload values but only {} bytes follow",
            cur.remaining()
        )));
    }
    let values = values as usize;
    bundle.data = Vec::with_capacity(values);
    for _ in 0..values {
        bundle.data.push(cur.f32().ok_or_else(|| short("payload"))?);
    }
    let trailer_len = cur.u64().ok_or_else(|| short("trailer length"))?;
    if trailer_len != cur.remaining() as u64 {
        return Err(BundleError::DimensionMismatch(format!(
            "trailer declares {trailer_len} bytes, {} remain",
            cur.remaining()
        )));
    }
    let trailer: Trailer = serde_json::from_slice(cur.take(trailer_len as usize).unwrap())
        .map_err(|e| BundleError::Trailer(e.to_string()))?;
    bundle.tokens = trailer.tokens;
    bundle.meta.extra = trailer.meta;
    bundle.meta.extra.remove("timestep");
    bundle.meta.extra.remove("layer");

    let report = validate_bundle(&bundle);
    if let Some(first) = report.violations.first() {
        return Err(match *first {
            Violation::NonFinite {
                frame,
                head,
                row,
                col,
            } => BundleError::NonFinite {
                frame,
                head,
                row,
                col,
            },
            Violation::RowSum { .. } => BundleError::Invalid(report),
            ref other => BundleError::DimensionMismatch(other.to_string()),
        });
    }
    Ok(bundle)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<AttentionBundle, BundleError> {
    decode_bundle(&std::fs::read(path)?)
}

/// Validates, then writes. Invalid bundles never reach the disk.
pub fn write_bundle(bundle: &AttentionBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
