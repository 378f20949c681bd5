//! Named parameter storage, seeded initialization and the weight file format.
//!
//! File layout, all integers little-endian:
//! `FALW`, version u16, tensor count u32, then per tensor a u16 name length,
//! the UTF-8 name, a u8 rank, one u32 per dimension and the f32 payload.
//! Running batch-norm statistics travel as ordinary tensors named
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnBatchStats, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"FALW";
pub const VERSION: u16 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on ±sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// One trainable tensor declared by an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub init: Init,
}

/// Everything a network declares: trainable tensors in order, and the
/// batch-norm layers (with channel counts) that carry running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSpecs {
    pub params: Vec<ParamSpec>,
    pub norms: Vec<(String, usize)>,
}

impl LayerSpecs {
    pub(crate) fn param(&mut self, name: String, dims: [usize; 4], init: Init) {
        self.params.push(ParamSpec { name, dims, init });
    }

    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.param(format!("{name}.weight"), [cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k });
        if bias {
            self.param(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros);
        }
    }

    pub(crate) fn tconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.param(format!("{name}.weight"), [cin, cout, k, k], Init::HeUniform { fan_in: cin });
        self.param(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros);
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) {
        self.param(format!("{name}.gamma"), [1, c, 1, 1], Init::Ones);
        self.param(format!("{name}.beta"), [1, c, 1, 1], Init::Zeros);
        self.norms.push((name.to_string(), c));
    }

    pub(crate) fn extend(&mut self, other: LayerSpecs) {
        self.params.extend(other.params);
        self.norms.extend(other.norms);
    }
}

pub type NormStats = IndexMap<String, BnBatchStats>;

/// Trainable tensors plus running statistics, both in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: IndexMap<String, Tensor>,
    stats: NormStats,
}

impl ModelWeights {
    /// Seeded initialization. Running statistics start at mean 0, variance 1
    /// so a fresh model can run in eval mode.
    pub fn init(specs: &LayerSpecs, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for spec in &specs.params {
            let n: usize = spec.dims.iter().product();
            let data = match spec.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            if params.insert(spec.name.clone(), Tensor::new(spec.dims, data)?).is_some() {
                return Err(Error::Config(format!("layer {} declared twice", spec.name)));
            }
        }
        let stats = specs
            .norms
            .iter()
            .map(|(name, c)| {
                let s = BnBatchStats {
                    mean: Some(vec![0.0; *c]),
                    var: Some(vec![1.0; *c]),
                };
                (name.clone(), s)
            })
            .collect();
        Ok(ModelWeights { params, stats })
    }

    /// Checks that exactly the declared tensors are present with the declared
    /// shapes and fills in missing running statistics as uninitialized.
    pub fn conform(&mut self, specs: &LayerSpecs) -> Result<()> {
        for spec in &specs.params {
            match self.params.get(&spec.name) {
                None => return Err(Error::Config(format!("missing tensor {}", spec.name))),
                Some(t) if t.dims() != spec.dims => {
                    return Err(Error::Config(format!(
                        "tensor {} has dims {:?}, expected {:?}",
                        spec.name,
                        t.dims(),
                        spec.dims
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !specs.params.iter().any(|s| &s.name == *k)) {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        for (name, c) in &specs.norms {
            let s = self.stats.entry(name.clone()).or_default();
            let bad = |v: &Option<Vec<f32>>| v.as_ref().is_some_and(|v| v.len() != *c);
            if bad(&s.mean) || bad(&s.var) {
                return Err(Error::Config(format!("running stats of {name} do not have {c} channels")));
            }
        }
        if let Some(extra) = self.stats.keys().find(|k| !specs.norms.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Config(format!("running stats for undeclared layer {extra}")));
        }
        Ok(())
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut NormStats {
        &mut self.stats
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Wraps every tensor as a graph leaf; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind(&self, trainable: bool) -> Params {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    Var::parameter(t.clone())
                } else {
                    Var::constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Params { vars }
    }

    /// The tensors in file order: parameters, then initialized running stats.
    pub fn file_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        for (name, s) in &self.stats {
            for (suffix, v) in [(RUNNING_MEAN, &s.mean), (RUNNING_VAR, &s.var)] {
                if let Some(v) = v {
                    out.push((format!("{name}{suffix}"), Tensor::from_parts([1, v.len(), 1, 1], v.clone())));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.file_entries();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(4);
            for d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, detail: "bad magic (expected FALW)".into() });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let mut params = IndexMap::new();
        let mut stats = NormStats::new();
        for _ in 0..count {
            let entry_at = r.pos as u64;
            let len = r.u16()? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: name_at, detail: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank_at = r.pos as u64;
            let rank = r.take(1)?[0] as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Format { offset: rank_at, detail: format!("rank {rank} outside 1..=4") });
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            // Lower ranks are right-aligned into (N, C, H, W); a vector is
            // read as per-channel values.
            let dims4 = match rank {
                1 => [1, dims[0], 1, 1],
                _ => {
                    let mut d = [1usize; 4];
                    d[4 - rank..].copy_from_slice(&dims);
                    d
                }
            };
            let n = dims4
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format { offset: rank_at, detail: "tensor size overflows".into() })?;
            let data: Vec<f32> = r
                .take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let duplicate = || Error::Format { offset: entry_at, detail: format!("duplicate tensor {name}") };
            if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
                let s = stats.entry(layer.to_string()).or_default();
                if s.mean.replace(data).is_some() {
                    return Err(duplicate());
                }
            } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
                let s = stats.entry(layer.to_string()).or_default();
                if s.var.replace(data).is_some() {
                    return Err(duplicate());
                }
            } else {
                if params.contains_key(&name) {
                    return Err(duplicate());
                }
                params.insert(name, Tensor::from_parts(dims4, data));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, detail: "trailing bytes after last tensor".into() });
        }
        Ok(ModelWeights { params, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameter names in declaration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len() as u64,
            detail: format!("truncated: needed {n} bytes at offset {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Graph leaves for one forward pass, looked up by layer name.
#[derive(Clone)]
pub struct Params {
    vars: IndexMap<String, Var>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Params {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Params { vars: vars.into_iter().collect() }
    }
}
