//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "STEVECKP"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          tensor data, concatenated
//! ```
//!
//! The header is `{"format_version": 1, "kind": ..., "step": ..., "config":
//! {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}`.
//! `offset` is relative to the start of the data section; `dtype` is `"f32"`
//! or `"f64"`, stored as raw IEEE-754 little-endian values in row-major order.
//! Tensors are listed in lexicographic name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"STEVECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// `"steve"`, `"mixture"` or `"diagnostic"`.
    pub kind: String,
    pub step: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::config(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies every stored tensor whose name exists in `ps`. Missing or
    /// mis-shaped parameters are errors unless their group is in `optional`.
    pub fn load_into(&self, ps: &ParamStore, optional: &[&str]) -> Result<()> {
        for (name, var) in ps.iter() {
            let group = name.split('.').next().unwrap_or("");
            match self.tensors.get(name) {
                Some((shape, data)) => {
                    if shape.as_slice() != var.dims() {
                        return Err(Error::shape(format!(
                            "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                            var.dims()
                        )));
                    }
                    let t = Tensor::from_vec(data.clone(), shape.as_slice(), &ps.device())?;
                    ps.set(name, &t)?;
                }
                None if optional.contains(&group) => {}
                None => {
                    return Err(Error::shape(format!("checkpoint has no tensor {name}")));
                }
            }
        }
        Ok(())
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::shape(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

/// Serialises the parameters of `ps` with a config echo.
pub fn save(path: &Path, ps: &ParamStore, cfg: &RunConfig, kind: &str, step: usize) -> Result<()> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(ps.len());
    for (name, var) in ps.iter() {
        let t = var.as_tensor().flatten_all()?;
        let offset = data.len() as u64;
        match t.dtype() {
            DType::F32 => t.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            DType::F64 => t.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            _ => {}
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: dtype_name(t.dtype())?.to_string(),
            shape: var.dims().to_vec(),
            offset,
            nbytes: data.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        step,
        config: cfg.to_json(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("tensor {}: unknown dtype {other}", e.name))),
        };
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if e.nbytes as usize != n * width || end > data.len() {
            return Err(bad(format!("tensor {}: data out of range", e.name)));
        }
        let raw = &data[start..end];
        let values: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        tensors.insert(e.name.clone(), (e.shape.clone(), values));
    }
    Ok(Checkpoint { header, tensors })
}
