//! Bit-packed code storage and the `RQAT` checkpoint container.
//!
//! Codes are stored as unsigned offsets `code - q_min` in a little-endian
//! continuous bitstream: code `i` occupies stream bits `[i*bits, (i+1)*bits)`,
//! and stream bit `k` is bit `k % 32` of word `k / 32`. Three-bit codes cross
//! word boundaries; nothing is padded except the tail of the last word.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "RQAT" | version: u32 | manifest_len: u64 | manifest (JSON) | payload
//! ```
//!
//! Manifest offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantSpec, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"RQAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    pub bits: u8,
    pub count: usize,
    pub words: Vec<u32>,
}

impl PackedBuffer {
    pub fn word_count(count: usize, bits: u8) -> usize {
        (count * bits as usize).div_ceil(32)
    }

    /// Checks word count, and that the unused tail bits are zero.
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::integrity(format!("unsupported bit width {}", self.bits)));
        }
        let need = Self::word_count(self.count, self.bits);
        if self.words.len() != need {
            return Err(Error::integrity(format!(
                "packed buffer holds {} words, {} codes of {} bits need {need}",
                self.words.len(),
                self.count,
                self.bits
            )));
        }
        let used = self.count * self.bits as usize;
        if used % 32 != 0 {
            let last = self.words[need - 1];
            if last >> (used % 32) != 0 {
                return Err(Error::integrity("nonzero padding bits in packed buffer"));
            }
        }
        Ok(())
    }
}

pub fn pack<C: Copy + Into<i32>>(codes: &[C], params: &QuantParams, bits: u8) -> Result<PackedBuffer> {
    if !(1..=16).contains(&bits) {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    let mut words = vec![0u32; PackedBuffer::word_count(codes.len(), bits)];
    let limit = 1u64 << bits;
    for (i, &c) in codes.iter().enumerate() {
        let c: i32 = c.into();
        if c < params.q_min || c > params.q_max {
            return Err(Error::integrity(format!(
                "code {c} at index {i} outside [{}, {}]",
                params.q_min, params.q_max
            )));
        }
        let offset = (c - params.q_min) as u64;
        if offset >= limit {
            return Err(Error::integrity(format!("code {c} does not fit in {bits} bits")));
        }
        let bit = i * bits as usize;
        let (w, shift) = (bit / 32, bit % 32);
        let wide = offset << shift;
        words[w] |= wide as u32;
        if shift + bits as usize > 32 {
            words[w + 1] |= (wide >> 32) as u32;
        }
    }
    Ok(PackedBuffer { bits, count: codes.len(), words })
}

pub fn unpack(buf: &PackedBuffer, params: &QuantParams) -> Result<Vec<i32>> {
    buf.validate()?;
    let bits = buf.bits as usize;
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(buf.count);
    for i in 0..buf.count {
        let bit = i * bits;
        let (w, shift) = (bit / 32, bit % 32);
        let mut wide = buf.words[w] as u64;
        if shift + bits > 32 {
            wide |= (buf.words[w + 1] as u64) << 32;
        }
        let code = ((wide >> shift) & mask) as i32 + params.q_min;
        if code > params.q_max {
            return Err(Error::integrity(format!("decoded code {code} above q_max {}", params.q_max)));
        }
        out.push(code);
    }
    Ok(out)
}

/// A named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Dense { shape: Vec<usize>, data: Vec<f64> },
    Quantized(QuantizedTensor),
}

impl TensorData {
    pub fn dense(shape: Vec<usize>, data: Vec<f64>) -> Self {
        TensorData::Dense { shape, data }
    }

    pub fn as_dense(&self) -> Option<(&[usize], &[f64])> {
        match self {
            TensorData::Dense { shape, data } => Some((shape, data)),
            TensorData::Quantized(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    #[serde(rename = "dense-f64")]
    DenseF64,
    #[serde(rename = "quantized")]
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<QuantSpec>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// An ordered collection of named tensors plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: TensorData) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn dense(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name)
            .and_then(TensorData::as_dense)
            .ok_or_else(|| Error::format(format!("missing dense tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::format(format!("duplicate tensor name '{name}'")));
            }
            let offset = payload.len() as u64;
            let entry = match t {
                TensorData::Dense { shape, data } => {
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(Error::domain(format!("tensor '{name}': data does not match shape")));
                    }
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    ManifestEntry {
                        name: name.clone(),
                        kind: TensorKind::DenseF64,
                        shape: shape.clone(),
                        spec: None,
                        offset,
                        length: payload.len() as u64 - offset,
                    }
                }
                TensorData::Quantized(q) => {
                    q.validate()?;
                    encode_quantized(q, &mut payload)?;
                    ManifestEntry {
                        name: name.clone(),
                        kind: TensorKind::Quantized,
                        shape: q.shape.to_vec(),
                        spec: Some(q.spec),
                        offset,
                        length: payload.len() as u64 - offset,
                    }
                }
            };
            entries.push(entry);
        }
        let manifest = Manifest { tensors: entries, meta: self.meta.clone() };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("bad header: file shorter than 16 bytes"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("bad version: {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("bad manifest: length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::format(format!("bad manifest: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
            let end = end.ok_or_else(|| {
                Error::format(format!("bad manifest: tensor '{}' range outside file", e.name))
            })?;
            ranges.push((e.offset, end, &e.name));
            let raw = &payload[e.offset as usize..end as usize];
            let t = match e.kind {
                TensorKind::DenseF64 => {
                    let n: usize = e.shape.iter().product();
                    if raw.len() != n * 8 {
                        return Err(Error::format(format!("bad manifest: tensor '{}' length", e.name)));
                    }
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::Dense { shape: e.shape.clone(), data }
                }
                TensorKind::Quantized => {
                    let spec = e
                        .spec
                        .ok_or_else(|| Error::format(format!("bad manifest: tensor '{}' lacks spec", e.name)))?;
                    if e.shape.len() != 2 {
                        return Err(Error::format(format!("bad manifest: tensor '{}' shape", e.name)));
                    }
                    TensorData::Quantized(decode_quantized(raw, [e.shape[0], e.shape[1]], spec, &e.name)?)
                }
            };
            tensors.push((e.name.clone(), t));
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::format(format!(
                    "bad manifest: tensors '{}' and '{}' overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let bytes = self.to_bytes()?;
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        Ok(serde_json::from_slice(&bytes[16..16 + mlen])?)
    }
}

// scales f32 | zero points i32 | packed words u32
fn encode_quantized(q: &QuantizedTensor, out: &mut Vec<u8>) -> Result<()> {
    for p in &q.params {
        let s = p.scale as f32;
        if s as f64 != p.scale {
            return Err(Error::integrity("scale is not representable in f32"));
        }
        out.extend_from_slice(&s.to_le_bytes());
    }
    for p in &q.params {
        out.extend_from_slice(&p.zero.to_le_bytes());
    }
    let (q_min, q_max) = q.spec.code_range();
    let range = QuantParams { scale: 1.0, zero: q_min, q_min, q_max };
    let buf = pack(&q.codes, &range, q.spec.bits)?;
    for w in &buf.words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(())
}

fn decode_quantized(raw: &[u8], shape: [usize; 2], spec: QuantSpec, name: &str) -> Result<QuantizedTensor> {
    let bad = |what: &str| Error::format(format!("bad manifest: tensor '{name}' {what}"));
    let groups = shape[0] * spec.groups_per_row(shape[1]).map_err(|_| bad("spec does not tile shape"))?;
    let count = shape[0] * shape[1];
    let words = PackedBuffer::word_count(count, spec.bits);
    if raw.len() != groups * 8 + words * 4 {
        return Err(bad("length"));
    }
    let (q_min, q_max) = spec.code_range();
    let (scales, rest) = raw.split_at(groups * 4);
    let (zeros, packed) = rest.split_at(groups * 4);
    let params: Vec<QuantParams> = scales
        .chunks_exact(4)
        .zip(zeros.chunks_exact(4))
        .map(|(s, z)| QuantParams {
            scale: f32::from_le_bytes(s.try_into().unwrap()) as f64,
            zero: i32::from_le_bytes(z.try_into().unwrap()),
            q_min,
            q_max,
        })
        .collect();
    for p in &params {
        p.validate()?;
    }
    let buf = PackedBuffer {
        bits: spec.bits,
        count,
        words: packed.chunks_exact(4).map(|w| u32::from_le_bytes(w.try_into().unwrap())).collect(),
    };
    let range = QuantParams { scale: 1.0, zero: q_min, q_min, q_max };
    let codes = unpack(&buf, &range)?.into_iter().map(|c| c as i16).collect();
    let q = QuantizedTensor { shape, codes, params, spec };
    q.validate()?;
    Ok(q)
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref())?;
    Checkpoint::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
