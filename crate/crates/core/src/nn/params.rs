//! Parameter tensors, initialisation, the binary archive format and
//! checkpoint transfer between network roles.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, NetworkSpec, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Parameters keyed by layer id.
pub type ParamSet = BTreeMap<String, LayerParams>;

/// Zero tensors with the shapes of every parameterised layer of `spec`.
pub fn zeros_like_spec(spec: &NetworkSpec) -> ParamSet {
    spec.param_layers()
        .map(|l| {
            let weight = Tensor::zeros(&l.weight_shape().expect("param layer"));
            let bias = l.bias_shape().map(|s| Tensor::zeros(&s));
            (l.id.clone(), LayerParams { weight, bias })
        })
        .collect()
}

/// Element-wise sum of two parameter sets with identical layout.
pub fn add_params(a: &ParamSet, b: &ParamSet) -> ParamSet {
    let mut out = a.clone();
    for (id, p) in out.iter_mut() {
        let q = &b[id];
        p.weight.data.iter_mut().zip(&q.weight.data).for_each(|(x, y)| *x += y);
        if let (Some(pb), Some(qb)) = (p.bias.as_mut(), q.bias.as_ref()) {
            pb.data.iter_mut().zip(&qb.data).for_each(|(x, y)| *x += y);
        }
    }
    out
}

/// Checks that `params` holds exactly the tensors `spec` needs.
pub fn check_params(spec: &NetworkSpec, params: &ParamSet) -> Result<()> {
    for l in spec.param_layers() {
        let p = params.get(&l.id).ok_or_else(|| Error::layer(&l.id, "no parameters"))?;
        if Some(&p.weight.shape) != l.weight_shape().as_ref() {
            return Err(Error::layer(&l.id, format!("weight shape {:?} != {:?}", p.weight.shape, l.weight_shape())));
        }
        if p.bias.as_ref().map(|b| &b.shape) != l.bias_shape().as_ref() {
            return Err(Error::layer(&l.id, "bias shape mismatch"));
        }
    }
    if let Some(extra) = params.keys().find(|k| spec.layer(k).is_none_or(|l| !l.has_params())) {
        return Err(Error::layer(extra, "parameters for a layer the network does not have"));
    }
    Ok(())
}

fn init_layer(spec: &NetworkSpec, id: &str, seed: u64) -> LayerParams {
    let l = spec.layer(id).expect("layer exists");
    let taps = l.kernel_volume();
    let fan_in = match l.kind {
        LayerKind::TransposedConv3d => (l.in_channels * taps / l.stride.pow(3)).max(1),
        _ => l.in_channels * taps,
    };
    let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id, 0));
    let shape = l.weight_shape().expect("param layer");
    let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut rng) as f32).collect();
    LayerParams { weight: Tensor { shape, data }, bias: l.bias_shape().map(|s| Tensor::zeros(&s)) }
}

/// Fan-in-scaled normal weights and zero biases. Each layer draws from its
/// own stream keyed by layer id, so a layer's initial values do not depend
/// on the rest of the network.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamSet {
    spec.param_layers().map(|l| (l.id.clone(), init_layer(spec, &l.id, seed))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cmft,
    Cmff,
    SelfRecon,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

const MAGIC: &[u8; 8] = b"CMXARCH1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata, stored as
/// `magic | u64 header length | JSON header | little-endian f32 payload`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (id, p) in params {
            self.tensors.insert(format!("{prefix}{id}.weight"), p.weight.clone());
            if let Some(b) = &p.bias {
                self.tensors.insert(format!("{prefix}{id}.bias"), b.clone());
            }
        }
    }

    /// Collects every `<prefix><layer>.weight|bias` entry.
    pub fn extract_params(&self, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            let Some(rest) = name.strip_prefix(prefix) else { break };
            if let Some(id) = rest.strip_suffix(".weight") {
                out.entry(id.to_string()).or_insert(LayerParams { weight: t.clone(), bias: None }).weight = t.clone();
            }
        }
        for (id, p) in out.iter_mut() {
            p.bias = self.tensors.get(&format!("{prefix}{id}.bias")).cloned();
        }
        if out.is_empty() {
            return Err(Error::InvalidValue(format!("archive has no parameters under `{prefix}`")));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), offset });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header { format_version: FORMAT_VERSION, meta: self.meta.clone(), tensors: entries })?;
        let mut bytes = Vec::with_capacity(16 + header.len() + 4 * offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a parameter archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let chunk = payload.get(start..start + 4 * n).ok_or_else(|| bad(&format!("tensor `{}` is truncated", e.name)))?;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(e.name, Tensor { shape: e.shape, data });
        }
        Ok(Self { meta: header.meta, tensors })
    }

    /// Writes through a temporary file so readers never see a partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(serde_json::json!({ "checkpoint": serde_json::to_value(&self.meta)? }));
        a.insert_params("", &self.params);
        Ok(a)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let meta = a.meta.get("checkpoint").ok_or_else(|| Error::format(path, "archive carries no checkpoint metadata"))?;
        Ok(Self { meta: serde_json::from_value(meta.clone())?, params: a.extract_params("")? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

/// Builds parameters for `target` from a trained checkpoint: every layer
/// except the output head must exist in the source with identical shapes and
/// is copied; the head is freshly initialised from `seed`.
pub fn transfer_parameters(source: &Checkpoint, target: &NetworkSpec, seed: u64) -> Result<Checkpoint> {
    let head = target.param_layers().last().map(|l| l.id.clone()).ok_or_else(|| Error::Transfer("target has no parameters".into()))?;
    let mut params = ParamSet::new();
    for l in target.param_layers() {
        if l.id == head {
            params.insert(l.id.clone(), init_layer(target, &l.id, seed));
            continue;
        }
        let p = source
            .params
            .get(&l.id)
            .ok_or_else(|| Error::Transfer(format!("layer `{}` is missing from the source", l.id)))?;
        if Some(&p.weight.shape) != l.weight_shape().as_ref() || p.bias.as_ref().map(|b| &b.shape) != l.bias_shape().as_ref() {
            return Err(Error::Transfer(format!(
                "layer `{}` has shape {:?} in the source but {:?} in the target",
                l.id,
                p.weight.shape,
                l.weight_shape().unwrap_or_default()
            )));
        }
        params.insert(l.id.clone(), p.clone());
    }
    if let Some(extra) = source.params.keys().find(|k| **k != head && !params.contains_key(*k)) {
        return Err(Error::Transfer(format!("source layer `{extra}` has no counterpart in the target")));
    }
    Ok(Checkpoint { meta: CheckpointMeta { phase: Phase::Cmff, ..source.meta.clone() }, params })
}
