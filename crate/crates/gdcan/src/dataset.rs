//! DCDS: the little-endian binary container for labeled image sets.
//!
//! Layout: magic `DCDS`, then `u32` version, N, C, H, W and class count; then
//! N·C·H·W `f32` pixels; then N `u32` labels (1-based on disk); then a `u32`
//! length followed by the UTF-8 JSON manifest (`null` when absent).

use std::fs;
use std::path::Path;

use gdcan_core::data::{LabeledImageSet, Manifest};
use gdcan_core::Tensor;

pub const MAGIC: &[u8; 4] = b"DCDS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    Version { version: u32, offset: usize },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} left")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("invalid {what} at offset {offset}: {detail}")]
    Invalid { what: &'static str, offset: usize, detail: String },
    #[error("{trailing} unexpected trailing bytes at offset {offset}")]
    Trailing { offset: usize, trailing: usize },
    #[error("pixel {index} is not exactly representable as f32")]
    NotF32 { index: usize },
    #[error("dimension {0} does not fit in a u32 field")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn u32_field(v: usize) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::TooLarge(v))
}

pub fn encode(set: &LabeledImageSet) -> Result<Vec<u8>, FormatError> {
    let shape = set.images.shape();
    let manifest = serde_json::to_vec(&set.manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(28 + set.images.len() * 4 + set.len() * 4 + 4 + manifest.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, u32_field(shape[0])?, u32_field(shape[1])?, u32_field(shape[2])?, u32_field(shape[3])?, u32_field(set.classes)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (index, &v) in set.images.data().iter().enumerate() {
        let f = v as f32;
        if f as f64 != v {
            return Err(FormatError::NotF32 { index });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    for &l in &set.labels {
        out.extend_from_slice(&u32_field(l + 1)?.to_le_bytes());
    }
    out.extend_from_slice(&u32_field(manifest.len())?.to_le_bytes());
    out.extend_from_slice(&manifest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<LabeledImageSet, FormatError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4)? != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version { version, offset: 4 });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n, c, h, w, classes] = dims;
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or(FormatError::Invalid {
            what: "dimensions",
            offset: 8,
            detail: format!("{n}x{c}x{h}x{w} overflows"),
        })?;
    let data = r
        .take(pixels * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset;
        let l = r.u32()? as usize;
        if l == 0 || l > classes {
            return Err(FormatError::Invalid {
                what: "label",
                offset: at,
                detail: format!("{l} outside 1..={classes}"),
            });
        }
        labels.push(l - 1);
    }
    let len = r.u32()? as usize;
    let at = r.offset;
    let manifest: Option<Manifest> = serde_json::from_slice(r.take(len)?).map_err(|e| FormatError::Invalid {
        what: "manifest",
        offset: at,
        detail: e.to_string(),
    })?;
    if r.offset != bytes.len() {
        return Err(FormatError::Trailing {
            offset: r.offset,
            trailing: bytes.len() - r.offset,
        });
    }
    let images = Tensor::new(vec![n, c, h, w], data).map_err(|e| FormatError::Invalid {
        what: "image tensor",
        offset: 8,
        detail: e.to_string(),
    })?;
    LabeledImageSet::new(images, labels, classes, manifest).map_err(|e| FormatError::Invalid {
        what: "set",
        offset: 0,
        detail: e.to_string(),
    })
}

pub fn save(set: &LabeledImageSet, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode(set)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LabeledImageSet, FormatError> {
    decode(&fs::read(path)?)
}
