//! `SQT1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SQT1" | u32 version | u32 len, JSON {spec, meta}
//! u32 tensor count | per tensor: u32 len, name | u8 rank | u32 dims.. | f32 data..
//! u32 grid count   | per grid:   u32 len, name | u8 scheme | u8 n_bits
//!                  | u8 has_spacing [f32 theta, f32 ratio_below, f32 ratio_above, u32 levels_below]
//!                  | u32 level count | f32 levels..
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Model, ModelError, ModelSpec, Result};
use crate::neuron::StateQuantizer;
use crate::quantizer::{ExpSpacing, ObserverMode, QuantGrid, RangeObserver, Scheme};
use crate::tensor::{BatchNormStats, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SQT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    /// Set when weights were replaced by post-training quantization.
    #[serde(default)]
    pub ptq_weight_bits: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    meta: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor)>,
    pub grids: Vec<(String, QuantGrid)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainingMeta) -> Self {
        let mut tensors = Vec::new();
        let mut grids = Vec::new();
        for (i, l) in model.layers().iter().enumerate() {
            let mut put = |n: &str, t: &Tensor| tensors.push((format!("layers.{i}.{n}"), t.clone()));
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    put("weight", weight);
                    put("bias", bias);
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    put("gamma", gamma);
                    put("beta", beta);
                    put("running_mean", &Tensor::new(vec![stats.channels()], stats.mean.clone()).unwrap());
                    put("running_var", &Tensor::new(vec![stats.channels()], stats.var.clone()).unwrap());
                    // The update count travels bit-cast in a single f32 slot.
                    let updates = stats.updates.min(u32::MAX as u64) as u32;
                    put("stat_updates", &Tensor::scalar(f32::from_bits(updates)));
                }
                Layer::Lif(n) => {
                    if let Some(g) = n.state_quant.as_ref().and_then(|q| q.grid()) {
                        grids.push((format!("layers.{i}.state_grid"), g.clone()));
                    }
                }
                _ => {}
            }
        }
        Self {
            spec: model.spec().clone(),
            meta,
            tensors,
            grids,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    /// Rebuilds the model. Stored state grids come back frozen.
    pub fn to_model(&self) -> Result<Model> {
        let fresh = Model::new(self.spec.clone())?;
        let mut layers = fresh.layers;
        for (i, l) in layers.iter_mut().enumerate() {
            let name = |n: &str| format!("layers.{i}.{n}");
            let fetch = |n: &str, like: &Tensor| -> Result<Tensor> {
                let t = self.tensor(&name(n))?;
                if t.shape() != like.shape() {
                    return Err(ModelError::Malformed(format!(
                        "tensor '{}' has shape {:?}, spec expects {:?}",
                        name(n),
                        t.shape(),
                        like.shape()
                    )));
                }
                Ok(t.clone())
            };
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    *weight = fetch("weight", weight)?;
                    *bias = fetch("bias", bias)?;
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    *gamma = fetch("gamma", gamma)?;
                    *beta = fetch("beta", beta)?;
                    let c = Tensor::zeros(&[stats.channels()]);
                    let mean = fetch("running_mean", &c)?.into_data();
                    let var = fetch("running_var", &c)?.into_data();
                    let updates = fetch("stat_updates", &Tensor::scalar(0.0))?.data()[0].to_bits();
                    *stats = BatchNormStats::from_running(mean, var, updates as u64);
                }
                Layer::Lif(n) => {
                    let grid = self
                        .grids
                        .iter()
                        .find(|(g, _)| *g == name("state_grid"))
                        .map(|(_, g)| g.clone());
                    n.state_quant = match (self.spec.state_quant, grid) {
                        (Some(sq), Some(g)) => Some(StateQuantizer::frozen(sq.grid, g)),
                        (Some(sq), None) if sq.observer != ObserverMode::Frozen => {
                            Some(StateQuantizer::new(sq.grid, RangeObserver::new(sq.observer)))
                        }
                        (Some(_), None) => {
                            return Err(ModelError::Malformed(format!(
                                "layer {i}: frozen state quantization without a stored grid"
                            )))
                        }
                        (None, Some(_)) => {
                            return Err(ModelError::Malformed(format!(
                                "layer {i}: stored grid but no state quantization in spec"
                            )))
                        }
                        (None, None) => None,
                    };
                }
                _ => {}
            }
        }
        Ok(Model::from_parts(self.spec.clone(), layers))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            meta: self.meta.clone(),
        })
        .expect("spec serializes");
        put_bytes(&mut out, &header);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.grids.len() as u32);
        for (name, g) in &self.grids {
            put_bytes(&mut out, name.as_bytes());
            out.push(match g.scheme() {
                Scheme::Uniform => 0,
                Scheme::Exponential => 1,
            });
            out.push(g.n_bits());
            match g.spacing() {
                Some(s) => {
                    out.push(1);
                    for v in [s.theta, s.ratio_below, s.ratio_above] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    put_u32(&mut out, s.levels_below as u32);
                }
                None => out.push(0),
            }
            put_u32(&mut out, g.levels().len() as u32);
            for v in g.levels() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| ModelError::Malformed(format!("header: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f32s(n, "tensor data")?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let count = r.u32("grid count")?;
        let mut grids = Vec::new();
        for _ in 0..count {
            let name = r.string("grid name")?;
            let scheme = match r.u8("grid scheme")? {
                0 => Scheme::Uniform,
                1 => Scheme::Exponential,
                s => return Err(ModelError::Malformed(format!("grid '{name}': scheme tag {s}"))),
            };
            let n_bits = r.u8("grid bits")?;
            let spacing = match r.u8("grid spacing flag")? {
                0 => None,
                1 => {
                    let v = r.f32s(3, "grid spacing")?;
                    Some(ExpSpacing {
                        theta: v[0],
                        ratio_below: v[1],
                        ratio_above: v[2],
                        levels_below: r.u32("grid spacing")? as usize,
                    })
                }
                f => return Err(ModelError::Malformed(format!("grid '{name}': spacing flag {f}"))),
            };
            let n = r.u32("grid level count")? as usize;
            let levels = r.f32s(n, "grid levels")?;
            let grid = QuantGrid::from_parts(levels, n_bits, scheme, spacing)
                .map_err(|e| ModelError::Malformed(format!("grid '{name}': {e}")))?;
            grids.push((name, grid));
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            spec: header.spec,
            meta: header.meta,
            tensors,
            grids,
        })
    }
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|source| ModelError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(ModelError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| ModelError::Malformed(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(ModelError::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
