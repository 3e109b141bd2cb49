//! `SMFE` feature files and their JSON-lines manifests.
//!
//! Layout (little-endian): `"SMFE"`, version `u32`, utterance count `u32`,
//! then per utterance an id (`u16` length + UTF-8), frame count `u32`,
//! dim `u32`, row-major `f32` features, label count `u32` and `u32` labels.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SMFE";
pub const FEATURE_VERSION: u32 = 1;

/// Where one utterance record starts inside a feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub offset: u64,
}

/// Serializes a corpus. Features are stored as `f32`, so values are rounded;
/// corpora whose values are already `f32`-exact round-trip bit for bit.
/// Returns the byte offset of each utterance record.
pub fn encode_features(corpus: &[Utterance]) -> Result<(Vec<u8>, Vec<u64>)> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(corpus.len(), "utterance count")?.to_le_bytes());
    let mut offsets = Vec::with_capacity(corpus.len());
    for u in corpus {
        offsets.push(out.len() as u64);
        let id = u.id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Contract(format!("utterance id longer than {} bytes", u16::MAX)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&narrow(u.frames(), "frame count")?.to_le_bytes());
        out.extend_from_slice(&narrow(u.dim(), "dim")?.to_le_bytes());
        for &v in u.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&narrow(u.labels.len(), "label count")?.to_le_bytes());
        for &l in &u.labels {
            out.extend_from_slice(&narrow(l, "label")?.to_le_bytes());
        }
    }
    Ok((out, offsets))
}

fn narrow(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit in u32")))
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Utterance>> {
    let mut r = ByteReader::new(bytes);
    let count = read_header(&mut r)?;
    let mut corpus = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        corpus.push(read_utterance(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after last utterance"));
    }
    Ok(corpus)
}

fn read_header(r: &mut ByteReader) -> Result<u32> {
    let magic = r.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SMFE\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(at, format!("unsupported feature file version {version}")));
    }
    r.u32("utterance count")
}

fn read_utterance(r: &mut ByteReader) -> Result<Utterance> {
    let id_len = r.u16("id length")? as usize;
    let id = r.utf8(id_len, "utterance id")?;
    let at = r.offset();
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("dim")? as usize;
    if frames == 0 || dim == 0 {
        return Err(Error::format(at, format!("utterance {id} has empty shape {frames}x{dim}")));
    }
    let n = frames
        .checked_mul(dim)
        .ok_or_else(|| Error::format(at, "feature shape overflows"))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let pos = r.offset();
        let v = r.f32("features")?;
        if !v.is_finite() {
            return Err(Error::format(pos, format!("non-finite feature value in utterance {id}")));
        }
        data.push(v as f64);
    }
    let count = r.u32("label count")? as usize;
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        labels.push(r.u32("labels")? as usize);
    }
    Ok(Utterance {
        id,
        features: Tensor::new(vec![frames, dim], data)?,
        labels,
    })
}

pub fn write_features(corpus: &[Utterance], path: &Path) -> Result<Vec<u64>> {
    let (bytes, offsets) = encode_features(corpus)?;
    std::fs::write(path, bytes)?;
    Ok(offsets)
}

pub fn read_features(path: &Path) -> Result<Vec<Utterance>> {
    decode_features(&std::fs::read(path)?)
}

/// Writes a feature file plus a manifest pointing at each record.
pub fn write_with_manifest(corpus: &[Utterance], features: &Path, manifest: &Path) -> Result<()> {
    let offsets = write_features(corpus, features)?;
    let path = features.to_string_lossy().into_owned();
    let mut out = std::io::BufWriter::new(std::fs::File::create(manifest)?);
    for (u, offset) in corpus.iter().zip(offsets) {
        let entry = ManifestEntry {
            id: u.id.clone(),
            path: path.clone(),
            offset,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

/// Loads every utterance named by a manifest. Relative feature paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files: HashMap<PathBuf, Vec<u8>> = HashMap::new();
    let mut corpus = Vec::new();
    for entry in read_manifest(path)? {
        let p = PathBuf::from(&entry.path);
        let p = if p.is_relative() { base.join(p) } else { p };
        if !files.contains_key(&p) {
            let bytes = std::fs::read(&p)?;
            read_header(&mut ByteReader::new(&bytes))?;
            files.insert(p.clone(), bytes);
        }
        let bytes = &files[&p];
        let offset = usize::try_from(entry.offset)
            .map_err(|_| Error::Contract(format!("offset {} out of range", entry.offset)))?;
        let u = read_utterance(&mut ByteReader::at(bytes, offset))?;
        if u.id != entry.id {
            return Err(Error::format(
                entry.offset,
                format!("manifest expects utterance {} but found {}", entry.id, u.id),
            ));
        }
        corpus.push(u);
    }
    Ok(corpus)
}
