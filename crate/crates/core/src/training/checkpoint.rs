//! Single-file checkpoints: `MVFCKPT\0`, u32 version, u64 header length, a
//! JSON header (stage, epoch, config, metrics, tensor table), then raw
//! little-endian tensor bytes in table order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use crate::error::{invalid, Error, Result};
use crate::nn::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MVFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    dtype: String,
    shape: Vec<usize>,
    nbytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Velocity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    epoch: usize,
    config: serde_json::Value,
    metrics: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
    pub velocity: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(invalid!("unsupported checkpoint dtype {other:?}")),
    }
}

impl Checkpoint {
    /// Deep-copies the parameters whose names start with `prefix` (all when
    /// empty) and, if given, the optimizer state for those parameters.
    pub fn capture(
        stage: Stage,
        epoch: usize,
        store: &ParamStore,
        prefix: &str,
        optimizer: Option<&Sgd>,
        config: serde_json::Value,
        metrics: serde_json::Value,
    ) -> Result<Self> {
        let keep = |n: &str| prefix.is_empty() || n.starts_with(prefix);
        let params = store
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let velocity = match optimizer {
            Some(opt) => opt
                .velocity()
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, v)| Ok((n.clone(), v.copy()?)))
                .collect::<Result<_>>()?,
            None => BTreeMap::new(),
        };
        Ok(Self { stage, epoch, config, metrics, params, velocity })
    }

    /// Writes parameter values into `store`. Every checkpoint tensor must
    /// exist in the store with the same shape; with `require_all`, every
    /// store parameter must also be present in the checkpoint.
    pub fn restore(&self, store: &ParamStore, require_all: bool) -> Result<usize> {
        for (name, t) in &self.params {
            if store.get(name).is_none() {
                return Err(invalid!("checkpoint parameter {name} does not exist in the model"));
            }
            store.set(name, t)?;
        }
        if require_all {
            let missing: Vec<_> = store.iter().map(|(n, _)| n).filter(|n| !self.params.contains_key(*n)).collect();
            if !missing.is_empty() {
                return Err(invalid!("checkpoint lacks {} model parameters (first: {})", missing.len(), missing[0]));
            }
        }
        Ok(self.params.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let groups = [(Group::Param, &self.params), (Group::Velocity, &self.velocity)];
        for (group, map) in groups {
            for (name, t) in map.iter() {
                let dtype = dtype_name(t.dtype())?;
                entries.push(TensorEntry {
                    name: name.clone(),
                    group,
                    dtype: dtype.to_string(),
                    shape: t.dims().to_vec(),
                    nbytes: (t.elem_count() * t.dtype().size_in_bytes()) as u64,
                });
            }
        }
        let header = Header {
            stage: self.stage,
            epoch: self.epoch,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let io = |e| Error::io(&tmp, e);
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for (_, map) in groups {
            for t in map.values() {
                let flat = t.flatten_all()?;
                match t.dtype() {
                    DType::F32 => {
                        for v in flat.to_vec1::<f32>()? {
                            w.write_f32::<LittleEndian>(v).map_err(io)?;
                        }
                    }
                    _ => {
                        for v in flat.to_vec1::<f64>()? {
                            w.write_f64::<LittleEndian>(v).map_err(io)?;
                        }
                    }
                }
            }
        }
        w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" => {
                    let mut v = vec![0f32; n];
                    r.read_f32_into::<LittleEndian>(&mut v).map_err(io)?;
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f64" => {
                    let mut v = vec![0f64; n];
                    r.read_f64_into::<LittleEndian>(&mut v).map_err(io)?;
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                other => return Err(Error::format(path, format!("tensor {} has unknown dtype {other}", e.name))),
            };
            match e.group {
                Group::Param => params.insert(e.name.clone(), t),
                Group::Velocity => velocity.insert(e.name.clone(), t),
            };
        }
        Ok(Self { stage: header.stage, epoch: header.epoch, config: header.config, metrics: header.metrics, params, velocity })
    }
}
