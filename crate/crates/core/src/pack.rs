//! `DWPK` packed model container.
//!
//! Little-endian. Header: magic `DWPK`, `u16` version, `u64` graph
//! fingerprint, `u32` block count. Each block:
//!
//! ```text
//! u16 name length, name bytes, u8 kind (0 dense, 1 sparse-quant),
//! u8 rank, rank × u32 dims, u32 payload length, payload,
//! u32 CRC32 of everything from the name length through the payload
//! ```
//!
//! Dense payload: `f32` values. Sparse-quant payload:
//!
//! ```text
//! u8 bits, u16 centroid count K, u32 entry count E, u32 survivor count,
//! K × f32 centroids, E × u8 deltas, ⌈E·bits/8⌉ bytes of packed indices
//! ```
//!
//! Survivor positions are coded as gaps from the previous survivor (the
//! first from a virtual position −1). A gap `g ≤ 255` is stored as
//! `g − 1`; larger gaps first emit filler entries of byte 255, each
//! advancing 255 positions with no weight. Fillers carry index 0, which is
//! ignored. Indices are packed LSB first.

use indexmap::IndexMap;
use thiserror::Error;

use crate::dropweight::PruneState;
use crate::nn::{Graph, Model, Tensor};
use crate::quant::{Codebook, QuantizedLayer};

pub const PACK_MAGIC: &[u8; 4] = b"DWPK";
pub const PACK_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 8 + 4;
pub const FILLER: u8 = 255;
const SPARSE_FIXED: usize = 1 + 2 + 4 + 4;

#[derive(Debug, Error, PartialEq)]
pub enum PackError {
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionMismatch(u16),
    #[error("truncated block at byte {0}")]
    TruncatedBlock(usize),
    #[error("checksum mismatch in block `{0}`")]
    ChecksumFail(String),
    #[error("malformed block `{0}`: {1}")]
    Malformed(String, String),
    #[error("container fingerprint {found:016x} does not match graph {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    SparseQuant,
}

impl BlockKind {
    fn tag(self) -> u8 {
        match self {
            BlockKind::Dense => 0,
            BlockKind::SparseQuant => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Dense => "dense",
            BlockKind::SparseQuant => "sparse-quant",
        }
    }
}

/// Gap-coded survivor positions.
pub fn encode_positions(keep: &[bool]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut prev: i64 = -1;
    for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
        let mut gap = i as i64 - prev;
        while gap > 255 {
            out.push(FILLER);
            gap -= 255;
        }
        out.push((gap - 1) as u8);
        prev = i as i64;
    }
    out
}

/// Positions decoded from gap entries; `None` if one falls outside `len`.
pub fn decode_positions(deltas: &[u8], len: usize) -> Option<Vec<bool>> {
    let mut keep = vec![false; len];
    let mut pos: i64 = -1;
    for &d in deltas {
        if d == FILLER {
            pos += 255;
        } else {
            pos += d as i64 + 1;
            *keep.get_mut(usize::try_from(pos).ok()?)? = true;
        }
    }
    Some(keep)
}

pub fn pack_indices(indices: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (indices.len() * bits as usize).div_ceil(8)];
    for (i, &v) in indices.iter().enumerate() {
        for b in 0..bits as usize {
            if v >> b & 1 == 1 {
                let bit = i * bits as usize + b;
                out[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bits: u8, count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| {
            (0..bits as usize).fold(0u8, |acc, b| {
                let bit = i * bits as usize + b;
                acc | ((bytes[bit / 8] >> (bit % 8) & 1) << b)
            })
        })
        .collect()
}

/// Payload bytes of a sparse-quant block: fixed fields, codebook, one
/// delta per entry and the packed index stream.
pub fn sparse_payload_len(entries: usize, centroids: usize, bits: u8) -> usize {
    SPARSE_FIXED + 4 * centroids + entries + (entries * bits as usize).div_ceil(8)
}

/// Block bytes outside the payload: name, kind, dims, length and CRC.
pub fn block_overhead(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 1 + 4 * rank + 4 + 4
}

fn sparse_payload(q: &QuantizedLayer) -> Vec<u8> {
    let deltas = encode_positions(&q.keep);
    let mut idx = Vec::with_capacity(deltas.len());
    let mut it = q.indices.iter();
    for &d in &deltas {
        idx.push(if d == FILLER { 0 } else { *it.next().unwrap() });
    }
    let mut p = Vec::new();
    p.push(q.codebook.bits);
    p.extend_from_slice(&(q.codebook.centroids.len() as u16).to_le_bytes());
    p.extend_from_slice(&(deltas.len() as u32).to_le_bytes());
    p.extend_from_slice(&(q.indices.len() as u32).to_le_bytes());
    for c in &q.codebook.centroids {
        p.extend_from_slice(&c.to_le_bytes());
    }
    p.extend_from_slice(&deltas);
    p.extend_from_slice(&pack_indices(&idx, q.codebook.bits));
    p
}

fn write_block(out: &mut Vec<u8>, name: &str, kind: BlockKind, shape: &[usize], payload: &[u8]) {
    let start = out.len();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind.tag());
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Serializes every tensor of `model` in graph order. Layers listed in
/// `quantized` become sparse-quant blocks and must agree with `state` and
/// with the model's weights bit for bit.
pub fn pack(model: &Model<f32>, state: &PruneState, quantized: &[QuantizedLayer]) -> Result<Vec<u8>, PackError> {
    let by_name: IndexMap<&str, &QuantizedLayer> = quantized.iter().map(|q| (q.name.as_str(), q)).collect();
    for q in quantized {
        let w = model
            .param(&q.name)
            .ok_or_else(|| PackError::InconsistentState(format!("unknown layer {}", q.name)))?;
        if w.shape() != q.shape.as_slice() || q.keep.len() != w.len() {
            return Err(PackError::InconsistentState(format!("{}: shape differs from model", q.name)));
        }
        if let Some(m) = state.layers.get(&q.name) {
            if m.keep != q.keep {
                return Err(PackError::InconsistentState(format!("{}: mask differs from prune state", q.name)));
            }
        }
        if q.indices.len() != q.keep.iter().filter(|k| **k).count()
            || q.indices.iter().any(|&i| i as usize >= q.codebook.centroids.len())
            || q.codebook.centroids.len() > 1 << q.codebook.bits
        {
            return Err(PackError::InconsistentState(format!("{}: indices do not fit codebook", q.name)));
        }
        let deq = q.dequantize();
        if deq.iter().zip(w.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(PackError::InconsistentState(format!(
                "{}: model weights differ from dequantized codebook",
                q.name
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&PACK_VERSION.to_le_bytes());
    out.extend_from_slice(&model.graph().fingerprint().to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        match by_name.get(name.as_str()) {
            Some(q) => write_block(&mut out, name, BlockKind::SparseQuant, t.shape(), &sparse_payload(q)),
            None => {
                let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                write_block(&mut out, name, BlockKind::Dense, t.shape(), &payload);
            }
        }
    }
    Ok(out)
}

/// A decoded block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    /// Whole block length in the file.
    pub bytes: usize,
    pub payload_bytes: usize,
    pub quantized: Option<QuantizedLayer>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unpacked {
    pub fingerprint: u64,
    pub blocks: Vec<Block>,
}

impl Unpacked {
    pub fn tensors(&self) -> IndexMap<String, Tensor<f32>> {
        self.blocks
            .iter()
            .map(|b| (b.name.clone(), Tensor::from_vec(&b.shape, b.values.clone())))
            .collect()
    }

    pub fn quantized(&self) -> Vec<QuantizedLayer> {
        self.blocks.iter().filter_map(|b| b.quantized.clone()).collect()
    }

    /// Masks of the sparse blocks in a fresh prune state for `model`.
    pub fn prune_state(&self, model: &Model<f32>) -> PruneState {
        let mut s = PruneState::from_zeros(model);
        for q in self.quantized() {
            if let Some(m) = s.layers.get_mut(&q.name) {
                m.keep = q.keep.clone();
            }
        }
        s
    }

    /// Rebuilds a model over `graph`, which must match the stored
    /// fingerprint.
    pub fn into_model(&self, graph: Graph) -> Result<Model<f32>, PackError> {
        let expected = graph.fingerprint();
        if expected != self.fingerprint {
            return Err(PackError::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Model::from_params(graph, self.tensors()).map_err(|e| PackError::Malformed("model".into(), e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        if self.bytes.len() - self.pos < n {
            return Err(PackError::TruncatedBlock(self.pos));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PackError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn decode_sparse(name: &str, shape: &[usize], p: &[u8]) -> Result<(QuantizedLayer, Vec<f32>), PackError> {
    let bad = |m: &str| PackError::Malformed(name.to_string(), m.to_string());
    let mut r = Reader { bytes: p, pos: 0 };
    let trunc = |_| bad("payload too short");
    let bits = r.u8().map_err(trunc)?;
    let k = r.u16().map_err(trunc)? as usize;
    let entries = r.u32().map_err(trunc)? as usize;
    let survivors = r.u32().map_err(trunc)? as usize;
    if !(1..=8).contains(&bits) || k == 0 || k > 1 << bits {
        return Err(bad("invalid codebook header"));
    }
    if p.len() != sparse_payload_len(entries, k, bits) {
        return Err(bad("payload length disagrees with header"));
    }
    let centroids = f32s(r.take(4 * k).map_err(trunc)?);
    let deltas = r.take(entries).map_err(trunc)?;
    let packed = r.take((entries * bits as usize).div_ceil(8)).map_err(trunc)?;
    let len: usize = shape.iter().product();
    let keep = decode_positions(deltas, len).ok_or_else(|| bad("survivor position out of range"))?;
    let all = unpack_indices(packed, bits, entries);
    let indices: Vec<u8> = all
        .iter()
        .zip(deltas)
        .filter(|(_, d)| **d != FILLER)
        .map(|(i, _)| *i)
        .collect();
    if indices.len() != survivors || indices.iter().any(|&i| i as usize >= k) {
        return Err(bad("index stream inconsistent"));
    }
    let q = QuantizedLayer {
        name: name.to_string(),
        shape: shape.to_vec(),
        codebook: Codebook { bits, centroids },
        keep,
        indices,
    };
    let values = q.dequantize();
    Ok((q, values))
}

pub fn unpack(bytes: &[u8]) -> Result<Unpacked, PackError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| PackError::BadMagic)? != PACK_MAGIC {
        return Err(PackError::BadMagic);
    }
    let version = r.u16()?;
    if version != PACK_VERSION {
        return Err(PackError::VersionMismatch(version));
    }
    let fingerprint = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let plen = r.u32()? as usize;
        let payload = r.take(plen)?;
        let body_end = r.pos;
        let crc = r.u32()?;
        if crc32fast::hash(&bytes[start..body_end]) != crc {
            return Err(PackError::ChecksumFail(name));
        }
        let len: usize = shape.iter().product();
        let (kind, quantized, values) = match tag {
            0 => {
                if plen != 4 * len {
                    return Err(PackError::Malformed(name, "dense payload length".into()));
                }
                (BlockKind::Dense, None, f32s(payload))
            }
            1 => {
                let (q, v) = decode_sparse(&name, &shape, payload)?;
                (BlockKind::SparseQuant, Some(q), v)
            }
            t => return Err(PackError::Malformed(name, format!("unknown kind tag {t}"))),
        };
        blocks.push(Block {
            name,
            kind,
            shape,
            bytes: r.pos - start,
            payload_bytes: plen,
            quantized,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(PackError::Malformed("container".into(), "trailing bytes".into()));
    }
    Ok(Unpacked { fingerprint, blocks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSize {
    pub name: String,
    pub kind: BlockKind,
    pub params: usize,
    pub bytes: usize,
    /// The same block stored dense.
    pub dense_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub header_bytes: usize,
    pub total_bytes: usize,
    pub dense_equivalent: usize,
}

impl SizeReport {
    /// Dense-equivalent bytes over packed bytes.
    pub fn ratio(&self) -> f64 {
        self.dense_equivalent as f64 / self.total_bytes as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<12} {:>10} {:>12} {:>12} {:>8}\n",
            "layer", "kind", "params", "bytes", "dense_bytes", "ratio"
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{:<28} {:<12} {:>10} {:>12} {:>12} {:>8.2}\n",
                l.name,
                l.kind.name(),
                l.params,
                l.bytes,
                l.dense_bytes,
                l.dense_bytes as f64 / l.bytes as f64
            ));
        }
        s.push_str(&format!(
            "{:<28} {:<12} {:>10} {:>12} {:>12} {:>8.2}\n",
            "header", "", "", self.header_bytes, self.header_bytes, 1.0
        ));
        s.push_str(&format!(
            "{:<28} {:<12} {:>10} {:>12} {:>12} {:>8.2}\n",
            "total",
            "",
            self.layers.iter().map(|l| l.params).sum::<usize>(),
            self.total_bytes,
            self.dense_equivalent,
            self.ratio()
        ));
        s
    }
}

/// Per-block sizes read back from a container; the total is the file
/// length.
pub fn size_report(bytes: &[u8]) -> Result<SizeReport, PackError> {
    let u = unpack(bytes)?;
    let layers: Vec<LayerSize> = u
        .blocks
        .iter()
        .map(|b| {
            let params = b.values.len();
            LayerSize {
                name: b.name.clone(),
                kind: b.kind,
                params,
                bytes: b.bytes,
                dense_bytes: block_overhead(&b.name, b.shape.len()) + 4 * params,
            }
        })
        .collect();
    let dense_equivalent = HEADER_BYTES + layers.iter().map(|l| l.dense_bytes).sum::<usize>();
    Ok(SizeReport {
        layers,
        header_bytes: HEADER_BYTES,
        total_bytes: bytes.len(),
        dense_equivalent,
    })
}

/// Report for a model packed without compression.
pub fn dense_size_report(model: &Model<f32>) -> SizeReport {
    let bytes = pack(model, &PruneState::new(model), &[]).expect("dense pack is always consistent");
    size_report(&bytes).expect("freshly packed container decodes")
}
