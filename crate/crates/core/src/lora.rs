//! Low-rank weight updates and the α-weighted merge.
//!
//! Each adapted layer carries factors `down` (`r x d_in`) and `up`
//! (`d_out x r`) plus a scale, and contributes `ΔW = scale · up · down`.
//! Convolution kernels are handled as `out x (in · kh · kw)` matrices.
//! Merging applies `W' = W + α · ΔW`; any rank-dependent scaling a trainer
//! wants is folded into `scale` so α stays a pure user multiplier.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_seed, rng};
use crate::tensor::{self, Tensor, WeightMap};

pub const ADAPTER_FORMAT: &str = "inout-lora";
pub const ADAPTER_VERSION: &str = "1";

const RESERVED_KEYS: [&str; 3] = ["format", "format_version", "rank"];

/// Matrix view of a base layer that an adapter targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    /// `d_out`
    pub rows: usize,
    /// `d_in` (flattened for kernels)
    pub cols: usize,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn of(name: impl Into<String>, weight: &Tensor) -> Self {
        let (rows, cols) = weight.matrix_dims();
        Self::new(name, rows, cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub down: Array2<f32>,
    pub up: Array2<f32>,
    pub scale: f32,
}

impl LoraEntry {
    /// `scale · up · down`
    pub fn delta(&self) -> Array2<f32> {
        self.up.dot(&self.down) * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    entries: BTreeMap<String, LoraEntry>,
    metadata: BTreeMap<String, String>,
}

/// The α merge multiplier, restricted to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct MergeWeight(f32);

impl MergeWeight {
    pub const ZERO: MergeWeight = MergeWeight(0.0);
    pub const FULL: MergeWeight = MergeWeight(1.0);

    pub fn new(alpha: f32) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::Config(format!("merge weight {alpha} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f32 {
        self.0
    }
}

impl TryFrom<f32> for MergeWeight {
    type Error = Error;

    fn try_from(v: f32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MergeWeight> for f32 {
    fn from(w: MergeWeight) -> f32 {
        w.0
    }
}

impl LoraAdapter {
    pub fn from_entries(
        rank: usize,
        entries: BTreeMap<String, LoraEntry>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        for (name, e) in &entries {
            if e.down.nrows() != rank || e.up.ncols() != rank {
                return Err(Error::Config(format!(
                    "layer `{name}`: factors {:?} / {:?} do not have rank {rank}",
                    e.up.dim(),
                    e.down.dim()
                )));
            }
        }
        Ok(Self {
            rank,
            entries,
            metadata,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &BTreeMap<String, LoraEntry> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, LoraEntry> {
        &mut self.entries
    }

    pub fn entry(&self, layer: &str) -> Option<&LoraEntry> {
        self.entries.get(layer)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn base_model_id(&self) -> Option<&str> {
        self.metadata.get("base_model_id").map(String::as_str)
    }

    pub fn training_config_digest(&self) -> Option<&str> {
        self.metadata.get("training_config_digest").map(String::as_str)
    }

    /// Largest absolute entry of any `ΔW`.
    pub fn max_abs_delta(&self) -> f32 {
        self.entries
            .values()
            .flat_map(|e| e.delta().into_iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_weight_map(&self) -> WeightMap {
        let mut out = WeightMap::new();
        for (name, e) in &self.entries {
            let mat = |a: &Array2<f32>| {
                Tensor::new(vec![a.nrows(), a.ncols()], a.iter().copied().collect())
                    .expect("array shape matches data")
            };
            out.insert(format!("{name}.lora_down"), mat(&e.down));
            out.insert(format!("{name}.lora_up"), mat(&e.up));
            out.insert(format!("{name}.lora_scale"), Tensor::new(vec![1], vec![e.scale]).expect("scalar"));
        }
        out
    }

    pub fn digest(&self) -> String {
        let mut h = crate::hashing::Hasher::new();
        h.str(&tensor::weights_digest(&self.to_weight_map()));
        for (k, v) in &self.metadata {
            h.str(k).str(v);
        }
        h.finish()
    }
}

/// Fresh adapter: `down` uniform in `±1/sqrt(d_in)`, `up` all zeros, so the
/// initial update is exactly zero.
pub fn init_adapter(layers: &[LayerShape], rank: usize, scale: f32, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    let mut entries = BTreeMap::new();
    for l in layers {
        if rank > l.rows.min(l.cols) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds layer `{}` dimensions {}x{}",
                l.name, l.rows, l.cols
            )));
        }
        let bound = 1.0 / (l.cols as f32).sqrt();
        let mut r = rng(derive_seed(seed, &l.name));
        let down = Array2::from_shape_fn((rank, l.cols), |_| r.random_range(-bound..bound));
        let up = Array2::zeros((l.rows, rank));
        entries.insert(l.name.clone(), LoraEntry { down, up, scale });
    }
    LoraAdapter::from_entries(rank, entries, BTreeMap::new())
}

/// `W' = W + α · scale · up · down` for adapted layers; other layers are
/// copied. The inputs are never modified, and α = 0 returns an exact copy.
pub fn merge(base: &WeightMap, adapter: &LoraAdapter, alpha: MergeWeight) -> Result<WeightMap> {
    for (name, e) in adapter.entries() {
        let w = base.get(name).ok_or_else(|| Error::Merge {
            layer: name.clone(),
            reason: "layer not present in base weights".into(),
        })?;
        let (rows, cols) = w.matrix_dims();
        if (rows, cols) != (e.up.nrows(), e.down.ncols()) {
            return Err(Error::Merge {
                layer: name.clone(),
                reason: format!(
                    "base weight is {rows}x{cols}, adapter update is {}x{}",
                    e.up.nrows(),
                    e.down.ncols()
                ),
            });
        }
    }
    let mut out = base.clone();
    let a = alpha.get();
    if a == 0.0 {
        return Ok(out);
    }
    for (name, e) in adapter.entries() {
        let coeff = a * e.scale;
        let delta = e.up.dot(&e.down);
        let w = out.get_mut(name).expect("checked above");
        for (dst, d) in w.data_mut().iter_mut().zip(delta.iter()) {
            *dst += coeff * d;
        }
    }
    Ok(out)
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let mut meta = adapter.metadata.clone();
    meta.insert("format".into(), ADAPTER_FORMAT.into());
    meta.insert("format_version".into(), ADAPTER_VERSION.into());
    meta.insert("rank".into(), adapter.rank.to_string());
    tensor::encode_archive(&adapter.to_weight_map(), &meta)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    let (tensors, mut meta) = tensor::decode_archive(bytes)?;
    match (meta.get("format").map(String::as_str), meta.get("format_version").map(String::as_str)) {
        (Some(ADAPTER_FORMAT), Some(ADAPTER_VERSION)) => {}
        (f, v) => {
            return Err(Error::Archive(format!(
                "not a supported adapter archive (format {f:?}, version {v:?})"
            )))
        }
    }
    let rank: usize = meta
        .get("rank")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::Archive("adapter archive lacks a valid rank".into()))?;
    for k in RESERVED_KEYS {
        meta.remove(k);
    }
    let matrix = |name: &str| -> Result<Array2<f32>> {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))?;
        match t.shape() {
            [r, c] => Ok(Array2::from_shape_vec((*r, *c), t.data().to_vec()).expect("shape checked")),
            s => Err(Error::Archive(format!("tensor `{name}` has shape {s:?}, expected a matrix"))),
        }
    };
    let mut entries = BTreeMap::new();
    for key in tensors.keys() {
        let Some(layer) = key.strip_suffix(".lora_down") else { continue };
        let scale = tensors
            .get(&format!("{layer}.lora_scale"))
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| Error::Archive(format!("missing scale for layer `{layer}`")))?;
        entries.insert(
            layer.to_string(),
            LoraEntry {
                down: matrix(key)?,
                up: matrix(&format!("{layer}.lora_up"))?,
                scale,
            },
        );
    }
    if entries.len() * 3 != tensors.len() {
        return Err(Error::Archive("adapter archive contains unpaired tensors".into()));
    }
    LoraAdapter::from_entries(rank, entries, meta).map_err(|e| Error::Archive(e.to_string()))
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode_adapter(adapter)?)
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}
