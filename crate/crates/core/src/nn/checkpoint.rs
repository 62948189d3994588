//! Dense checkpoints: little-endian, magic `DNSE`, `u16` version, `u32`
//! tensor count; per tensor a `u16` name length, UTF-8 name, `u8` rank,
//! `u32` dims and `f32` data.

use indexmap::IndexMap;

use super::model::Model;
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const DENSE_MAGIC: &[u8; 4] = b"DNSE";
pub const DENSE_VERSION: u16 = 1;

pub fn write_tensors(tensors: &IndexMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DENSE_MAGIC);
    out.extend_from_slice(&DENSE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_tensors(bytes: &[u8]) -> Result<IndexMap<String, Tensor<f32>>, NnError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], NnError> {
        if bytes.len() - pos < n {
            return Err(NnError::Checkpoint(format!("truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != DENSE_MAGIC {
        return Err(NnError::Checkpoint("bad magic (expected DNSE)".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != DENSE_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    /// All parameters (running statistics included) as `f32` tensors.
    pub fn export_tensors(&self) -> IndexMap<String, Tensor<f32>> {
        self.params().iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        write_tensors(&self.export_tensors())
    }
}

/// Loads the graph's parameters from a tensor set; extra tensors are
/// returned untouched.
pub fn load_model<T: Scalar>(
    graph: super::graph::Graph,
    mut tensors: IndexMap<String, Tensor<f32>>,
) -> Result<(Model<T>, IndexMap<String, Tensor<f32>>), NnError> {
    let mut params = IndexMap::new();
    for spec in &graph.params {
        let t = tensors
            .shift_remove(&spec.name)
            .ok_or_else(|| NnError::UnknownParam(spec.name.clone()))?;
        params.insert(spec.name.clone(), t.cast::<T>());
    }
    Ok((Model::from_params(graph, params)?, tensors))
}
