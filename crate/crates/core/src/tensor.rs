//! Named `f32` tensors and the on-disk archive they are stored in.
//!
//! Archives use the safetensors layout: a JSON header with per-tensor
//! shape/dtype/offsets and a free-form string metadata block, followed by
//! raw little-endian data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::hashing::Hasher;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub type WeightMap = BTreeMap<String, Tensor>;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` when viewed as a matrix: the leading dimension against
    /// everything else, so a `[out, in, 3, 3]` kernel becomes `out x in*9`.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [rows, rest @ ..] => (*rows, rest.iter().product()),
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Digest over names, shapes and exact bit patterns.
pub fn weights_digest(weights: &WeightMap) -> String {
    let mut h = Hasher::new();
    for (name, t) in weights {
        h.str(name);
        let shape: Vec<u8> = t.shape.iter().flat_map(|d| (*d as u64).to_le_bytes()).collect();
        h.field(&shape);
        h.field(&t.le_bytes());
    }
    h.finish()
}

pub fn weights_bit_eq(a: &WeightMap, b: &WeightMap) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

pub fn encode_archive(tensors: &WeightMap, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.le_bytes(), t.shape.clone()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, b, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), b)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Archive(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
}

pub fn decode_archive(bytes: &[u8]) -> Result<(WeightMap, BTreeMap<String, String>)> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let mut tensors = WeightMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Archive(format!(
                "tensor `{name}` has dtype {:?}, expected F32",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    Ok((tensors, metadata))
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_archive(
    path: &Path,
    tensors: &WeightMap,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_archive(tensors, metadata)?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn read_archive(path: &Path) -> Result<(WeightMap, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}
