//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "JCRA"                  magic
//! u32                     format version
//! u32 + bytes             model config as compact JSON
//! u32                     tensor count
//! per tensor, by name:
//!   u32 + bytes           name (UTF-8)
//!   u32                   rank
//!   u64 × rank            dimensions
//!   f64 × product(dims)   values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use jcra_core::model::{Model, ModelConfig, ModelParams};
use jcra_core::tensor::Tensor;

use crate::config::ModelSection;
use crate::error::{read, write, Error, Result};

pub const MAGIC: [u8; 4] = *b"JCRA";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&ModelSection::full(&model.cfg)).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// The config echo alone.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { bytes };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(4)? != MAGIC {
        return Err(bad("not a JCRA checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let n = r.u32()? as usize;
    let section: ModelSection =
        serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("config echo: {e}")))?;
    let mut cfg = ModelConfig::default();
    section.apply(&mut cfg);
    // a missing field would silently take its default
    if ModelSection::full(&cfg) != section {
        return Err(bad("config echo is incomplete"));
    }
    Ok(cfg)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes };
    let cfg = header(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        if len.checked_mul(8).is_none_or(|b| b > r.bytes.len()) {
            return Err(bad("truncated"));
        }
        let data: Vec<f64> = r.take(len * 8)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = ModelParams::from_tensors(&cfg, tensors).map_err(|e| bad(format!("tensors do not fit the config: {e}")))?;
    Model::new(cfg, params).map_err(|e| bad(e.to_string()))
}

/// [`decode`], also requiring the echoed config to equal `expected`.
pub fn decode_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Model> {
    let model = decode(bytes)?;
    if &model.cfg != expected {
        return Err(bad(format!(
            "config mismatch: checkpoint has {:?}, expected {:?}",
            model.cfg, expected
        )));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write(path, &encode(model))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = read(path)?;
    match expected {
        Some(cfg) => decode_expecting(&bytes, cfg),
        None => decode(&bytes),
    }
}
