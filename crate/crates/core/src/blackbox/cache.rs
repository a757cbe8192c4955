//! Frozen soft pseudo-labels for the target training set.
//!
//! File layout (little-endian):
//!
//! ```text
//! b"KDPLCACH" | version: u32 | count: u32
//! count x { id_len: u16 | id | height: u32 | width: u32 | classes: u32
//!           | payload: f64 x (height * width * classes) | crc32(id_len..payload): u32 }
//! ```
//!
//! The file depends only on the maps themselves, so identical inputs give a
//! byte-identical file. Provenance (predictor, creation time) lives in a JSON
//! sidecar next to it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::BlackBoxPredictor;
use crate::data::{resize, Dataset, ImageTensor, SoftLabelMap};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KDPLCACH";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheProvenance {
    pub predictor: String,
    pub created_unix: u64,
    pub queries: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelCache {
    entries: Vec<(String, SoftLabelMap)>,
    index: HashMap<String, usize>,
    provenance: CacheProvenance,
}

impl PseudoLabelCache {
    pub fn new(entries: Vec<(String, SoftLabelMap)>, provenance: CacheProvenance) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate cache entry {id}")));
            }
        }
        Ok(Self {
            entries,
            index,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SoftLabelMap> {
        self.index.get(id).map(|i| &self.entries[*i].1)
    }

    pub fn entries(&self) -> &[(String, SoftLabelMap)] {
        &self.entries
    }

    pub fn provenance(&self) -> &CacheProvenance {
        &self.provenance
    }

    /// Errors with the first sample of `dataset` that has no entry.
    pub fn ensure_covers(&self, dataset: &Dataset) -> Result<()> {
        for s in dataset.samples() {
            let Some(map) = self.get(&s.id) else {
                return Err(Error::Config(format!("pseudo-label cache has no entry for sample {}", s.id)));
            };
            if map.height() != s.image.height() || map.width() != s.image.width() {
                return Err(Error::Config(format!(
                    "cached map for {} is {}x{}, image is {}x{}",
                    s.id,
                    map.height(),
                    map.width(),
                    s.image.height(),
                    s.image.width()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, map) in &self.entries {
            let start = buf.len();
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for d in [map.height(), map.width(), map.classes()] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for p in map.values() {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            let crc = crc32fast::hash(&buf[start..]);
            buf.extend_from_slice(&crc.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], provenance: CacheProvenance) -> Result<Self> {
        let bad = |what: String| Error::Data(format!("pseudo-label cache: {what}"));
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).map_err(&bad)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u32().map_err(&bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = cur.u32().map_err(&bad)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let start = cur.pos;
            let id_len = cur.u16().map_err(&bad)? as usize;
            let id = String::from_utf8(cur.take(id_len).map_err(&bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
            let (h, w, k) = (
                cur.u32().map_err(&bad)? as usize,
                cur.u32().map_err(&bad)? as usize,
                cur.u32().map_err(&bad)? as usize,
            );
            let payload = cur.take(h * w * k * 8).map_err(&bad)?;
            let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let end = cur.pos;
            let crc = cur.u32().map_err(&bad)?;
            if crc32fast::hash(&bytes[start..end]) != crc {
                return Err(bad(format!("checksum mismatch for entry {id}")));
            }
            entries.push((id, SoftLabelMap::new(h, w, k, values)?));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Self::new(entries, provenance)
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_vec_pretty(&self.provenance).expect("provenance serializes");
        let side = Self::sidecar(path);
        fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar(path);
        let provenance = match fs::read(&side) {
            Ok(meta) => serde_json::from_slice(&meta).map_err(|e| Error::Data(format!("{}: {e}", side.display())))?,
            Err(_) => CacheProvenance {
                predictor: "unknown".into(),
                created_unix: 0,
                queries: 0,
            },
        };
        Self::from_bytes(&bytes, provenance)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Resizes every class plane of `map` bilinearly; convex weights keep rows stochastic.
fn resize_soft(map: &SoftLabelMap, h: usize, w: usize) -> Result<SoftLabelMap> {
    let k = map.classes();
    let (mh, mw) = (map.height(), map.width());
    let mut planar = vec![0.0; k * mh * mw];
    for (i, row) in map.values().chunks_exact(k).enumerate() {
        for (c, p) in row.iter().enumerate() {
            planar[c * mh * mw + i] = *p;
        }
    }
    let resized = resize(&ImageTensor::new(mh, mw, k, planar)?, h, w)?;
    let mut values = vec![0.0; h * w * k];
    for c in 0..k {
        for (i, p) in resized.plane(c).iter().enumerate() {
            values[i * k + c] = *p;
        }
    }
    for row in values.chunks_exact_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    SoftLabelMap::new(h, w, k, values)
}

/// Queries the predictor once per sample, in dataset order.
///
/// Images are resized to the predictor's advertised input size when it has
/// one, and the answers are resized back to the image grid.
pub fn precompute_pseudo_labels(predictor: &BlackBoxPredictor, target_train: &Dataset) -> Result<PseudoLabelCache> {
    if target_train.is_empty() {
        return Err(Error::Input("cannot precompute pseudo-labels for an empty dataset".into()));
    }
    let before = predictor.query_count();
    let info = predictor.info();
    let mut entries = Vec::with_capacity(target_train.len());
    for s in target_train.samples() {
        let wrap = |e: Error| Error::Predictor {
            sample_id: s.id.clone(),
            source: Box::new(e),
        };
        let (h, w) = (s.image.height(), s.image.width());
        let map = match info.input_size {
            Some((ih, iw)) if (ih, iw) != (h, w) => {
                let query = resize(&s.image, ih, iw).map_err(wrap)?;
                let raw = predictor.predict(&query).map_err(wrap)?;
                resize_soft(&raw, h, w).map_err(wrap)?
            }
            _ => predictor.predict(&s.image).map_err(wrap)?,
        };
        if map.height() != h || map.width() != w {
            return Err(wrap(Error::Protocol(format!(
                "predictor answered {}x{} for a {h}x{w} image",
                map.height(),
                map.width()
            ))));
        }
        entries.push((s.id.clone(), map));
    }
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    PseudoLabelCache::new(
        entries,
        CacheProvenance {
            predictor: predictor.describe(),
            created_unix,
            queries: predictor.query_count() - before,
        },
    )
}
