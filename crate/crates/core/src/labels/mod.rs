//! Pseudo-label machinery: k-means codebooks, the two-iteration target
//! builders and on-disk formats (varint label sets, f32 codebooks).

pub mod kmeans;
pub mod targets;

pub use kmeans::{Codebook, CodebookSource};

use std::fs;
use std::path::Path;

use crate::errors::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

const LABELS_MAGIC: &[u8; 4] = b"SSLB";
const CODEBOOK_MAGIC: &[u8; 4] = b"SSCB";
const FORMAT_VERSION: u32 = 1;

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v != 0 {
            out.push(byte | 0x80);
        } else {
            out.push(byte);
            break;
        }
    }
}

pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0u32;
    loop {
        let &b = bytes.get(*pos).ok_or_else(|| Error::Malformed {
            what: "varint".into(),
            detail: "unexpected end of input".into(),
        })?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
        if shift >= 64 {
            return Err(Error::Malformed {
                what: "varint".into(),
                detail: "value overflows 64 bits".into(),
            });
        }
    }
}

/// Persist per-utterance label sequences as one file:
/// magic, version, count, then (id, varint labels) records.
pub fn write_labels(path: &Path, entries: &[(String, Vec<usize>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, labels) in entries {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        write_varint(&mut out, labels.len() as u64);
        for &l in labels {
            write_varint(&mut out, l as u64);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Malformed {
        what: format!("label file {}", path.display()),
        detail: detail.into(),
    };
    if bytes.len() < 12 || &bytes[0..4] != LABELS_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated id length"));
        }
        let id_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + id_len > bytes.len() {
            return Err(bad("truncated id"));
        }
        let id = String::from_utf8(bytes[pos..pos + id_len].to_vec())
            .map_err(|_| bad("id is not utf-8"))?;
        pos += id_len;
        let n = read_varint(&bytes, &mut pos)? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_varint(&bytes, &mut pos)? as usize);
        }
        entries.push((id, labels));
    }
    Ok(entries)
}

/// Persist a codebook as a little-endian f32 matrix with a small header.
pub fn write_codebook(path: &Path, cb: &Codebook<Real>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    match cb.source {
        CodebookSource::Mfcc => out.push(0),
        CodebookSource::Layer(l) => {
            out.push(1);
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(cb.n_clusters() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    for &v in cb.centroids.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_codebook(path: &Path) -> Result<Codebook<Real>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Malformed {
        what: format!("codebook file {}", path.display()),
        detail: detail.into(),
    };
    if bytes.len() < 9 || &bytes[0..4] != CODEBOOK_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut pos = 8usize;
    let source = match bytes[pos] {
        0 => {
            pos += 1;
            CodebookSource::Mfcc
        }
        1 => {
            pos += 1;
            if pos + 4 > bytes.len() {
                return Err(bad("truncated layer id"));
            }
            let l = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            CodebookSource::Layer(l)
        }
        t => return Err(bad(&format!("unknown source tag {t}"))),
    };
    if pos + 8 > bytes.len() {
        return Err(bad("truncated shape"));
    }
    let c = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    if bytes.len() - pos != c * d * 4 {
        return Err(bad("payload size does not match shape"));
    }
    let data: Vec<Real> = bytes[pos..]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as Real)
        .collect();
    Ok(Codebook {
        centroids: Tensor::new(vec![c, d], data)?,
        source,
    })
}
