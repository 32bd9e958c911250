//! Storage-side codecs and the `EMB1` container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! off  size  field
//! 0    4     magic     b"EMB1"
//! 4    1     version   1
//! 5    1     dtype     0 = f32, 1 = i8, 2 = parameter block
//! 6    1     flags     bit 0: label block present
//! 7    1     reserved  0
//! 8    4     dim       u32, >= 1 (tensor count for parameter blocks)
//! 12   8     count     u64 rows (total f32 values for parameter blocks)
//! 20   4     scale     f32, only when dtype = i8
//! ..         payload   count*dim values, row-major (f32 or i8)
//! ..         labels    count u32 values, only when flags bit 0 is set
//! ```
//!
//! See `docs/FORMAT.md` for the parameter-block variant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u8 = 1;
pub const QMAX: i32 = 127;

const FLAG_LABELS: u8 = 1;
const BASE_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    Params = 2,
}

impl DType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::Params),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreHeader {
    pub dtype: DType,
    pub dim: u32,
    pub count: u64,
    pub scale: Option<f32>,
    pub has_labels: bool,
}

impl StoreHeader {
    pub fn encoded_len(&self) -> usize {
        BASE_HEADER_LEN + if self.dtype == DType::I8 { 4 } else { 0 }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype as u8);
        out.push(if self.has_labels { FLAG_LABELS } else { 0 });
        out.push(0);
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        if let Some(s) = self.scale {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
}

/// Symmetric int8 codes with one scale for the whole store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedStore {
    codes: Vec<i8>,
    rows: usize,
    dim: usize,
    scale: f32,
}

impl QuantizedStore {
    pub fn new(rows: usize, dim: usize, codes: Vec<i8>, scale: f32) -> Result<Self> {
        if codes.len() != rows * dim {
            return Err(Error::dim("QuantizedStore::new", format!("{rows}x{dim}"), codes.len()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!("scale must be finite and positive, got {scale}")));
        }
        if codes.contains(&i8::MIN) {
            return Err(Error::Argument("codes must lie in [-127, 127]".into()));
        }
        Ok(Self { codes, rows, dim, scale })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

/// Payload of an embedding store.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Matrix),
    I8(QuantizedStore),
}

impl Payload {
    pub fn rows(&self) -> usize {
        match self {
            Payload::F32(m) => m.rows(),
            Payload::I8(q) => q.rows,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Payload::F32(m) => m.cols(),
            Payload::I8(q) => q.dim,
        }
    }

    /// Float view of the payload (dequantizing int8 codes).
    pub fn to_matrix(&self) -> Matrix {
        match self {
            Payload::F32(m) => m.clone(),
            Payload::I8(q) => dequantize(q),
        }
    }
}

pub(crate) fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half-way cases away from zero on every platform.
    v.round()
}

fn code_for(v: f32, scale: f32) -> i8 {
    let q = round_half_away(f64::from(v) / f64::from(scale));
    q.clamp(-f64::from(QMAX), f64::from(QMAX)) as i8
}

/// Per-tensor symmetric quantization: `scale = max|m| / 127` (1 for an all-zero matrix).
pub fn quantize_uniform(m: &Matrix) -> Result<QuantizedStore> {
    if m.as_slice().is_empty() {
        return Err(Error::Argument("cannot quantize an empty matrix".into()));
    }
    let max_abs = m.as_slice().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / QMAX as f32 };
    quantize_with_scale(m, scale)
}

/// Quantizes with an externally calibrated scale; out-of-range values saturate.
pub fn quantize_with_scale(m: &Matrix, scale: f32) -> Result<QuantizedStore> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Argument(format!("scale must be finite and positive, got {scale}")));
    }
    let codes = m.as_slice().iter().map(|&v| code_for(v, scale)).collect();
    Ok(QuantizedStore {
        codes,
        rows: m.rows(),
        dim: m.cols(),
        scale,
    })
}

pub fn dequantize(q: &QuantizedStore) -> Matrix {
    let data = q.codes.iter().map(|&c| f32::from(c) * q.scale).collect();
    Matrix::new(q.rows, q.dim, data).expect("codes times a finite scale are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub original_bits_per_embedding: u64,
    pub compressed_bits_per_embedding: u64,
    pub ratio: f64,
}

/// Compression ratio: original embedding size over compressed size, in bits.
pub fn size_report(
    original_dim: usize,
    original_bits: usize,
    compressed_dim: usize,
    compressed_bits: usize,
) -> Result<SizeReport> {
    if [original_dim, original_bits, compressed_dim, compressed_bits].contains(&0) {
        return Err(Error::Argument(format!(
            "size_report needs positive sizes, got ({original_dim}, {original_bits}, {compressed_dim}, {compressed_bits})"
        )));
    }
    let original = (original_dim * original_bits) as u64;
    let compressed = (compressed_dim * compressed_bits) as u64;
    Ok(SizeReport {
        original_bits_per_embedding: original,
        compressed_bits_per_embedding: compressed,
        ratio: original as f64 / compressed as f64,
    })
}

/// Serializes a store to bytes.
pub fn encode_store(payload: &Payload, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    let rows = payload.rows();
    let dim = payload.dim();
    if dim == 0 {
        return Err(Error::Argument("store dim must be >= 1".into()));
    }
    if let Some(l) = labels {
        if l.len() != rows {
            return Err(Error::dim("encode_store", format!("{rows} rows"), format!("{} labels", l.len())));
        }
    }
    let header = StoreHeader {
        dtype: match payload {
            Payload::F32(_) => DType::F32,
            Payload::I8(_) => DType::I8,
        },
        dim: u32::try_from(dim).map_err(|_| Error::Argument(format!("dim {dim} exceeds u32")))?,
        count: rows as u64,
        scale: match payload {
            Payload::F32(_) => None,
            Payload::I8(q) => Some(q.scale),
        },
        has_labels: labels.is_some(),
    };
    let elem = if header.dtype == DType::I8 { 1 } else { 4 };
    let mut out = Vec::with_capacity(
        header.encoded_len() + rows * dim * elem + labels.map_or(0, |l| l.len() * 4),
    );
    header.encode(&mut out);
    match payload {
        Payload::F32(m) => m.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Payload::I8(q) => out.extend(q.codes.iter().map(|&c| c as u8)),
    }
    if let Some(l) = labels {
        l.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

/// Writes a store and returns the exact number of bytes written.
pub fn write_store(path: impl AsRef<Path>, payload: &Payload, labels: Option<&[u32]>) -> Result<u64> {
    let bytes = encode_store(payload, labels)?;
    fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                field,
                offset: self.pos as u64,
                detail: format!("need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.format_err(field, "length overflow"))?;
        Ok(self
            .take(bytes, field)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn format_err(&self, field: &'static str, detail: impl Into<String>) -> Error {
        Error::Format {
            field,
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<StoreHeader> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            field: "magic",
            offset: 0,
            detail: format!("expected {MAGIC:?}, found {magic:?}"),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            field: "version",
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let dtype_raw = r.u8("dtype")?;
    let dtype = DType::from_u8(dtype_raw).ok_or(Error::Format {
        field: "dtype",
        offset: 5,
        detail: format!("unknown dtype {dtype_raw}"),
    })?;
    let flags = r.u8("flags")?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format {
            field: "flags",
            offset: 6,
            detail: format!("unknown flag bits {flags:#04x}"),
        });
    }
    r.u8("reserved")?;
    let dim = r.u32("dim")?;
    if dim == 0 {
        return Err(Error::Format {
            field: "dim",
            offset: 8,
            detail: "dim must be >= 1".into(),
        });
    }
    let count = r.u64("count")?;
    let scale = if dtype == DType::I8 {
        let s = r.f32("scale")?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Format {
                field: "scale",
                offset: 20,
                detail: format!("scale must be finite and positive, got {s}"),
            });
        }
        Some(s)
    } else {
        None
    };
    Ok(StoreHeader {
        dtype,
        dim,
        count,
        scale,
        has_labels: flags & FLAG_LABELS != 0,
    })
}

/// Parses a store from bytes; the inverse of [`encode_store`].
pub fn decode_store(bytes: &[u8]) -> Result<(Payload, Option<Vec<u32>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let rows = usize::try_from(header.count).map_err(|_| r.format_err("count", "row count too large"))?;
    let dim = header.dim as usize;
    let n = rows
        .checked_mul(dim)
        .ok_or_else(|| r.format_err("count", "payload size overflow"))?;
    let payload = match header.dtype {
        DType::F32 => {
            let offset = r.pos;
            let data = r.f32s(n, "payload")?;
            Payload::F32(Matrix::new(rows, dim, data).map_err(|e| Error::Format {
                field: "payload",
                offset: offset as u64,
                detail: e.to_string(),
            })?)
        }
        DType::I8 => {
            let codes: Vec<i8> = r.take(n, "payload")?.iter().map(|&b| b as i8).collect();
            if codes.contains(&i8::MIN) {
                return Err(r.format_err("payload", "code -128 outside [-127, 127]"));
            }
            Payload::I8(QuantizedStore {
                codes,
                rows,
                dim,
                scale: header.scale.expect("i8 header carries a scale"),
            })
        }
        DType::Params => {
            return Err(Error::Format {
                field: "dtype",
                offset: 5,
                detail: "parameter block is not an embedding store".into(),
            })
        }
    };
    let labels = if header.has_labels {
        let mut l = Vec::with_capacity(rows);
        for _ in 0..rows {
            l.push(r.u32("labels")?);
        }
        Some(l)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(r.format_err("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok((payload, labels))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<(Payload, Option<Vec<u32>>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_store(&bytes)
}

/// Serializes a parameter block: a tensor table, the f32 tensors in order,
/// then a length-prefixed metadata blob.
pub fn encode_param_block(tensors: &[&Matrix], meta: &[u8]) -> Result<Vec<u8>> {
    if tensors.is_empty() {
        return Err(Error::Argument("parameter block needs at least one tensor".into()));
    }
    let total: usize = tensors.iter().map(|t| t.as_slice().len()).sum();
    let header = StoreHeader {
        dtype: DType::Params,
        dim: tensors.len() as u32,
        count: total as u64,
        scale: None,
        has_labels: false,
    };
    let mut out = Vec::with_capacity(header.encoded_len() + tensors.len() * 8 + total * 4 + 4 + meta.len());
    header.encode(&mut out);
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    }
    for t in tensors {
        t.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    Ok(out)
}

pub fn decode_param_block(bytes: &[u8]) -> Result<(Vec<Matrix>, Vec<u8>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r)?;
    if header.dtype != DType::Params {
        return Err(Error::Format {
            field: "dtype",
            offset: 5,
            detail: format!("expected parameter block, found {:?}", header.dtype),
        });
    }
    let mut shapes = Vec::with_capacity(header.dim as usize);
    for _ in 0..header.dim {
        let rows = r.u32("tensor_table")? as usize;
        let cols = r.u32("tensor_table")? as usize;
        shapes.push((rows, cols));
    }
    let total: usize = shapes.iter().map(|(a, b)| a * b).sum();
    if total as u64 != header.count {
        return Err(Error::Format {
            field: "count",
            offset: 12,
            detail: format!("tensor table sums to {total}, header says {}", header.count),
        });
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (rows, cols) in shapes {
        let offset = r.pos;
        let data = r.f32s(rows * cols, "payload")?;
        tensors.push(Matrix::new(rows, cols, data).map_err(|e| Error::Format {
            field: "payload",
            offset: offset as u64,
            detail: e.to_string(),
        })?);
    }
    let meta_len = r.u32("meta")? as usize;
    let meta = r.take(meta_len, "meta")?.to_vec();
    if r.pos != bytes.len() {
        return Err(r.format_err("trailer", "unexpected trailing bytes"));
    }
    Ok((tensors, meta))
}
