//! Checkpoint container:
//!
//! ```text
//! b"KDSGCKPT" | version: u32 | spec_len: u32 | spec (JSON, spec_len bytes)
//!   | param_count: u64 | params (f64 LE) | crc32 of everything before it: u32
//! ```
//! All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelSpec, SegmentationModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KDSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &SegmentationModel, path: &Path) -> Result<()> {
    let spec = serde_json::to_vec(model.spec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(32 + spec.len() + model.num_parameters() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    buf.extend_from_slice(&(model.num_parameters() as u64).to_le_bytes());
    for p in model.parameters() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_header(reader: &mut impl Read, path: &Path) -> Result<(ModelSpec, Vec<u8>)> {
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut head = [0u8; 16];
    reader.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let spec_len = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    reader.read_exact(&mut spec_bytes).map_err(|_| bad("truncated spec"))?;
    let spec: ModelSpec = serde_json::from_slice(&spec_bytes).map_err(|e| bad(&format!("spec metadata: {e}")))?;
    let mut consumed = head.to_vec();
    consumed.extend_from_slice(&spec_bytes);
    Ok((spec, consumed))
}

/// Reads only the embedded model spec.
pub fn read_checkpoint_spec(path: &Path) -> Result<ModelSpec> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut f, path).map(|(spec, _)| spec)
}

pub fn load_checkpoint(path: &Path) -> Result<SegmentationModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut cursor = &bytes[..];
    let (spec, header) = read_header(&mut cursor, path)?;
    if cursor.len() < 12 {
        return Err(bad("truncated parameter section"));
    }
    let count = u64::from_le_bytes(cursor[..8].try_into().unwrap()) as usize;
    let body = &cursor[8..];
    if body.len() != count * 8 + 4 {
        return Err(bad(&format!("expected {count} parameters, file size disagrees")));
    }
    let (blob, crc_bytes) = body.split_at(count * 8);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(&bytes[..header.len() + 8 + count * 8]) != stored {
        return Err(bad("checksum mismatch"));
    }
    let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    SegmentationModel::from_parts(spec, params)
}

/// Loads parameters into `model`, refusing checkpoints whose spec differs in shape.
pub fn load_checkpoint_into(model: &mut SegmentationModel, path: &Path) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    if !loaded.spec().same_shape(model.spec()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} (width {}, depth {}), model is {} (width {}, depth {})",
            loaded.spec().architecture.name(),
            loaded.spec().width_factor,
            loaded.spec().depth,
            model.spec().architecture.name(),
            model.spec().width_factor,
            model.spec().depth
        )));
    }
    model.params.copy_from_slice(loaded.parameters());
    model.spec = loaded.spec().clone();
    Ok(())
}
