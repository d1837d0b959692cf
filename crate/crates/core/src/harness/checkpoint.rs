//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SHADECKP"
//! version  u32      1
//! meta     u32 length + UTF-8 TOML (architecture, input shape, epoch, ...)
//! count    u32      number of tensors
//! tensor*  u32 name length + UTF-8 name,
//!          u32 rank, rank × u64 dims, product(dims) × f64
//! ```
//!
//! Tensor names: `param.{layer}.weight`, `param.{layer}.bias`,
//! `velocity.{layer}.weight`, `velocity.{layer}.bias`, and
//! `shade.{layer}` with shape `(units, 4)` holding `(μ⁰, μ¹, p⁰, p¹)` rows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::nn::{LayerSpec, Network, Params};
use crate::optim::SgdState;
use crate::regularizers::{ShadeStates, ShadeUnitState, StateGranularity};
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"SHADECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub regularizer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shade_granularity: Option<StateGranularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(path: &Path, msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

impl Checkpoint {
    pub fn capture(net: &Network, meta: CheckpointMeta, sgd: Option<&SgdState>, states: Option<&ShadeStates>) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, l) in net.layers().iter().enumerate() {
            if let Some(p) = &l.params {
                tensors.insert(format!("param.{i}.weight"), p.weight.clone());
                tensors.insert(format!("param.{i}.bias"), p.bias.clone());
            }
        }
        if let Some(sgd) = sgd {
            for (i, v) in sgd.velocity.iter().enumerate() {
                if let Some(v) = v {
                    tensors.insert(format!("velocity.{i}.weight"), v.weight.clone());
                    tensors.insert(format!("velocity.{i}.bias"), v.bias.clone());
                }
            }
        }
        if let Some(st) = states {
            for l in &st.layers {
                let data = l.units.iter().flat_map(|u| [u.mu0, u.mu1, u.p0, u.p1]).collect();
                tensors.insert(
                    format!("shade.{}", l.layer),
                    Tensor::new(vec![l.units.len(), 4], data).expect("state rows"),
                );
            }
        }
        Self { meta, tensors }
    }

    /// Rebuilds the network; fails if any parameter is missing or misshapen.
    pub fn network(&self) -> Result<Network, HarnessError> {
        let params = self
            .meta
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                if !spec.is_parametric() {
                    return Ok(None);
                }
                let get = |part: &str| {
                    self.tensors
                        .get(&format!("param.{i}.{part}"))
                        .cloned()
                        .ok_or_else(|| HarnessError::Checkpoint(format!("missing param.{i}.{part}")))
                };
                Ok(Some(Params {
                    weight: get("weight")?,
                    bias: get("bias")?,
                }))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Network::from_parts(&self.meta.layers, &self.meta.input_shape, params)
            .map_err(|e| HarnessError::Checkpoint(e.to_string()))
    }

    /// Copies saved SHADE unit states into `states`.
    pub fn restore_states(&self, states: &mut ShadeStates) -> Result<(), HarnessError> {
        for idx in 0..states.layers.len() {
            let layer = states.layers[idx].layer;
            let t = self
                .tensors
                .get(&format!("shade.{layer}"))
                .ok_or_else(|| HarnessError::Checkpoint(format!("missing shade.{layer}")))?;
            let units = t
                .data()
                .chunks_exact(4)
                .map(|r| ShadeUnitState {
                    mu0: r[0],
                    mu1: r[1],
                    p0: r[2],
                    p1: r[3],
                })
                .collect();
            states
                .set_units(idx, units)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// Copies saved velocities into `sgd`.
    pub fn restore_velocity(&self, sgd: &mut SgdState) -> Result<(), HarnessError> {
        for (i, v) in sgd.velocity.iter_mut().enumerate() {
            if let Some(v) = v {
                for (part, dst) in [("weight", &mut v.weight), ("bias", &mut v.bias)] {
                    let t = self
                        .tensors
                        .get(&format!("velocity.{i}.{part}"))
                        .ok_or_else(|| HarnessError::Checkpoint(format!("missing velocity.{i}.{part}")))?;
                    if t.shape() != dst.shape() {
                        return Err(HarnessError::Checkpoint(format!("velocity.{i}.{part} has wrong shape")));
                    }
                    *dst = t.clone();
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = toml::to_string(&self.meta).expect("meta serializes");
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_text = r.string()?;
        let meta: CheckpointMeta = toml::from_str(&meta_text).map_err(|e| bad(path, e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| bad(path, format!("tensor {name} is truncated")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(path, e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(bad(path, "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let tmp = path.with_extension("tmp");
        let io = |e| HarnessError::io(path, e);
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, HarnessError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad(self.path, "name is not UTF-8"))
    }
}
