//! Corpus persistence: one little-endian f32 sample file per utterance plus
//! a manifest with id, sample count, transcript and run-length encoded
//! phone labels.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::audio::synth::SyntheticUtterance;
use crate::audio::Waveform;
use crate::errors::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

pub fn utterance_id(index: usize) -> String {
    format!("utt_{index:05}")
}

fn sample_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.f32"))
}

/// Run-length encode phone labels as `phone:count` pairs.
pub fn rle_encode(labels: &[usize]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i + 1;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        if !out.is_empty() {
            out.push(',');
        }
        out.push_str(&format!("{}:{}", labels[i], j - i));
        i = j;
    }
    out
}

pub fn rle_decode(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if s.is_empty() {
        return Ok(out);
    }
    for pair in s.split(',') {
        let (phone, count) = pair.split_once(':').ok_or_else(|| Error::Malformed {
            what: "phone RLE".into(),
            detail: format!("bad pair {pair:?}"),
        })?;
        let phone: usize = phone.parse().map_err(|_| Error::Malformed {
            what: "phone RLE".into(),
            detail: format!("bad phone {phone:?}"),
        })?;
        let count: usize = count.parse().map_err(|_| Error::Malformed {
            what: "phone RLE".into(),
            detail: format!("bad count {count:?}"),
        })?;
        out.extend(std::iter::repeat(phone).take(count));
    }
    Ok(out)
}

/// Write a corpus directory; rerunning with the same utterances is
/// byte-identical.
pub fn write_corpus(dir: &Path, utts: &[SyntheticUtterance]) -> Result<()> {
    let parent_ok = dir.parent().map(|p| p.as_os_str().is_empty() || p.exists());
    if parent_ok == Some(false) {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory missing"),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, utt) in utts.iter().enumerate() {
        let id = utterance_id(i);
        let mut bytes = Vec::with_capacity(utt.waveform.len() * 4);
        for &s in utt.waveform.samples() {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        let path = sample_path(dir, &id);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!(
            "{id}\t{}\t{}\t{}\n",
            utt.waveform.len(),
            utt.transcript,
            rle_encode(&utt.phone_ids)
        ));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Read a corpus directory back in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, SyntheticUtterance)>> {
    let mpath = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut utts = Vec::new();
    for (line_no, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Malformed {
                what: format!("manifest line {}", line_no + 1),
                detail: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        let n_samples: usize = fields[1].parse().map_err(|_| Error::Malformed {
            what: format!("manifest line {}", line_no + 1),
            detail: format!("bad sample count {:?}", fields[1]),
        })?;
        let transcript = fields[2].to_string();
        let phone_ids = rle_decode(fields[3])?;
        let path = sample_path(dir, &id);
        let mut file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != n_samples * 4 {
            return Err(Error::Malformed {
                what: format!("{}", path.display()),
                detail: format!("expected {} samples, file has {} bytes", n_samples, bytes.len()),
            });
        }
        let samples: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        utts.push((
            id,
            SyntheticUtterance {
                waveform: Waveform::new(samples)?,
                phone_ids,
                transcript,
            },
        ));
    }
    Ok(utts)
}

/// Append-only text log, one line per entry.
pub struct TextLog {
    file: fs::File,
}

impl TextLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TextLog { file })
    }

    pub fn from_file(file: fs::File) -> Self {
        TextLog { file }
    }

    pub fn line(&mut self, s: &str) -> std::io::Result<()> {
        writeln!(self.file, "{s}")
    }
}
