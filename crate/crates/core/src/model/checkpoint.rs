//! Single-file checkpoints.
//!
//! Layout (little-endian): `"SMCK"`, version `u32`, config JSON (`u32`
//! length + UTF-8), seed `u64`, block count `u32`, then per parameter its
//! name (`u16` length + UTF-8), rank `u32`, `u64` extents and `f64` values.

use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SMCK\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let json = r.take(len, "config")?;
    let config: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| Error::format(at, format!("config does not parse: {e}")))?;
    let seed = r.u64("seed")?;
    let count = r.u32("block count")? as usize;
    let mut model = Model::build(config, seed).map_err(|e| Error::format(at, e.to_string()))?;
    if count != model.params.len() {
        return Err(Error::format(
            r.offset() - 4,
            format!("{count} parameter blocks, architecture has {}", model.params.len()),
        ));
    }
    let mut loaded = ParamStore::new();
    for expected in model.params.iter() {
        let at = r.offset();
        let name_len = r.u16("block name length")? as usize;
        let name = r.utf8(name_len, "block name")?;
        if name != expected.name {
            return Err(Error::format(at, format!("block {name:?} where {:?} was expected", expected.name)));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        if shape != expected.value.shape() {
            return Err(Error::format(
                at,
                format!("block {name} has shape {shape:?}, expected {:?}", expected.value.shape()),
            ));
        }
        let n = expected.value.len();
        let raw = r.take(n * 8, "block values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        loaded.add(name, Tensor::new(shape, data)?)?;
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after last block"));
    }
    model.params.copy_from(&loaded)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
