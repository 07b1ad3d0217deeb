//! Binary checkpoints of a [`ToyModel`] and its adapters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"EQCK"            magic
//! u32                format version
//! u32 + bytes        manifest, UTF-8 JSON
//! u32                record count
//! per record, sorted by name:
//!   u32 + bytes      name
//!   u8               rank
//!   u32 * rank       dims
//!   f32 * prod(dims) values
//! ```
//!
//! Values are stored at 32-bit precision; everything else is exact. Writing
//! the same model twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::params::ParamSet;
use crate::pipeline::model::{ModelConfig, ToyModel};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"EQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub set: String,
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the run configuration that produced the tensors.
    pub config_hash: String,
    /// Stages applied so far, in order (e.g. `["1", "2"]`).
    pub stages: Vec<String>,
    pub model: ModelConfig,
    pub adapters: Vec<AdapterMeta>,
    pub active_adapter: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel, config_hash: &str, stages: Vec<String>) -> Self {
        let mut adapters = Vec::new();
        for set in model.adapters.set_names() {
            for a in model.adapters.set(set).into_iter().flat_map(|s| s.values()) {
                adapters.push(AdapterMeta {
                    set: set.to_string(),
                    target: a.target.clone(),
                    rank: a.rank,
                    alpha: a.alpha,
                    dropout: a.dropout,
                });
            }
        }
        Checkpoint {
            manifest: Manifest {
                config_hash: config_hash.to_string(),
                stages,
                model: model.config.clone(),
                adapters,
                active_adapter: model.adapters.active().map(str::to_string),
            },
            tensors: model.named_tensors(),
        }
    }

    /// Rebuilds the model described by the manifest and fills in every tensor.
    pub fn to_model(&self) -> Result<ToyModel> {
        let mut model = ToyModel::new(self.manifest.model.clone(), 0)?;
        for meta in &self.manifest.adapters {
            let cfg = LoraConfig {
                rank: meta.rank,
                alpha: meta.alpha,
                dropout: meta.dropout,
            };
            let (_, d_in, d_out) = model
                .lora_targets()
                .into_iter()
                .find(|(t, _, _)| *t == meta.target)
                .ok_or_else(|| Error::Lookup(format!("adapter target `{}` not in model", meta.target)))?;
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let adapter = LoraAdapter::new(&mut rng, &meta.target, d_in, d_out, &cfg)?;
            model.adapters.insert_adapter(&meta.set, adapter);
        }
        if let Some(active) = &self.manifest.active_adapter {
            model.adapters.select(active)?;
        }
        load_into(&mut model, &self.tensors)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Format {
            offset: 8,
            msg: format!("manifest: {e}"),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: version_at as u64,
                msg: format!("unsupported version {version} (expected {VERSION})"),
            });
        }
        let len = r.u32("manifest length")? as usize;
        let manifest_at = r.pos;
        let manifest = serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Format {
            offset: manifest_at as u64,
            msg: format!("manifest: {e}"),
        })?;
        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_at = r.pos;
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Format {
                    offset: name_at as u64,
                    msg: "name is not UTF-8".into(),
                })?
                .to_string();
            let rank_at = r.pos;
            let rank = r.take(1, "rank")?[0] as usize;
            if rank > MAX_RANK {
                return Err(Error::Format {
                    offset: rank_at as u64,
                    msg: format!("rank {rank} of `{name}` exceeds {MAX_RANK}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.saturating_mul(4), "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
                offset: rank_at as u64,
                msg: format!("`{name}`: {e}"),
            })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format {
                    offset: name_at as u64,
                    msg: format!("duplicate record `{name}`"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format {
        offset: out.len() as u64,
        msg: format!("length {n} does not fit in u32"),
    })?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Overwrites every parameter of `model` from `tensors`. The name sets must
/// match exactly and each shape must agree.
pub fn load_into<P: ParamSet + ?Sized>(model: &mut P, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let names = model.names();
    if let Some(extra) = tensors.keys().find(|k| !names.contains(k)) {
        return Err(Error::Lookup(format!("checkpoint tensor `{extra}` has no parameter")));
    }
    let mut err = None;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.get(&name) {
            None => err = Some(Error::Lookup(format!("checkpoint lacks `{name}`"))),
            Some(src) if src.shape() != t.shape() => {
                err = Some(Error::dim(
                    "load_checkpoint",
                    format!("`{name}`: stored {:?}, model {:?}", src.shape(), t.shape()),
                ))
            }
            Some(src) => *t = src.clone(),
        }
    });
    err.map_or(Ok(()), Err)
}

/// `|a - b|` measured in units of the f32 spacing at `a`.
pub fn f32_ulps(a: f64, b: f64) -> f64 {
    let x = a as f32;
    let next = f32::from_bits(x.abs().to_bits() + 1);
    let ulp = (next - x.abs()) as f64;
    (a - b).abs() / ulp
}
