//! KV page compression: scale + INT8 quantization, row-wise delta coding and
//! run-length coding, with an early-exit bypass to raw FP16 storage whenever
//! the encoded payload would not be smaller than the original.
//!
//! The INT8 stage is the only lossy step. Delta and RLE are exact inverses,
//! so for every non-raw scheme `decompress(compress(b))` is bit-identical to
//! `dequantize(quantize(b))`.
//!
//! Serialized layout (little endian):
//!
//! ```text
//! [scheme:1][rows:4][cols:4][scale:4 (f32)][payload ...]
//! ```

pub mod bench;
mod delta;
mod quant;
mod rle;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delta::{delta_decode, delta_encode};
pub use quant::{dequantize, quantize, Quantized, QMAX};
pub use rle::{rle_decode, rle_encode};

/// Bytes of the serialized header: scheme tag, two dimensions and the scale.
pub const HEADER_BYTES: usize = 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("block dimensions must be non-zero (got {rows}x{cols})")]
    EmptyBlock { rows: usize, cols: usize },
    #[error("expected {expected} values for the block shape, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("value at index {index} is not finite in FP16 ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("corrupt compressed block: {0}")]
    Corrupt(&'static str),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
}

/// A KV page `X ∈ R^{N×d}` in row-major order.
///
/// Inputs built with [`KvBlock::from_f32`] are rounded to FP16. Reconstructed
/// blocks keep the exact `q·s` products in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl KvBlock {
    /// Validates shape and that every value fits in FP16 without overflow.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, CodecError> {
        if rows == 0 || cols == 0 {
            return Err(CodecError::EmptyBlock { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(CodecError::Shape {
                expected: rows * cols,
                got: values.len(),
            });
        }
        let fp16_max = f64::from(f16::MAX);
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > fp16_max)
        {
            return Err(CodecError::NonFinite { index, value });
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a block from `f32` data rounded to the nearest FP16 value.
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self, CodecError> {
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CodecError::NonFinite {
                index,
                value: f64::from(v),
            });
        }
        let values = data.iter().map(|&v| f64::from(f16::from_f32(v))).collect();
        Self::new(rows, cols, values)
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Size of the block stored as FP16.
    pub fn raw_bytes(&self) -> usize {
        self.values.len() * 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Raw,
    Int8,
    Int8Delta,
    Int8DeltaRle,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Raw, Scheme::Int8, Scheme::Int8Delta, Scheme::Int8DeltaRle];

    pub fn tag(self) -> u8 {
        match self {
            Scheme::Raw => 0,
            Scheme::Int8 => 1,
            Scheme::Int8Delta => 2,
            Scheme::Int8DeltaRle => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn is_lossless(self) -> bool {
        self == Scheme::Raw
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Raw => "raw",
            Scheme::Int8 => "int8",
            Scheme::Int8Delta => "int8_delta",
            Scheme::Int8DeltaRle => "int8_delta_rle",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "raw" | "fp16" | "none" => Ok(Scheme::Raw),
            "int8" => Ok(Scheme::Int8),
            "int8_delta" | "delta" => Ok(Scheme::Int8Delta),
            "int8_delta_rle" | "rle" | "full" => Ok(Scheme::Int8DeltaRle),
            _ => Err(CodecError::UnknownScheme(s.to_string())),
        }
    }
}

/// Output of [`compress`]: `⟨s, payload⟩` plus the shape and scheme tag.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    pub scheme: Scheme,
    pub rows: u32,
    pub cols: u32,
    pub scale: f32,
    pub payload: Vec<u8>,
}

impl CompressedBlock {
    pub fn original_bytes(&self) -> usize {
        self.rows as usize * self.cols as usize * 2
    }

    pub fn stored_bytes(&self) -> usize {
        self.payload.len() + HEADER_BYTES
    }

    /// Original bytes over payload plus header.
    pub fn ratio(&self) -> f64 {
        self.original_bytes() as f64 / self.stored_bytes() as f64
    }

    /// Original bytes over payload only.
    pub fn payload_ratio(&self) -> f64 {
        self.original_bytes() as f64 / self.payload.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.stored_bytes());
        out.push(self.scheme.tag());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_BYTES {
            return Err(CodecError::Corrupt("truncated header"));
        }
        let scheme = Scheme::from_tag(bytes[0]).ok_or(CodecError::Corrupt("unknown scheme tag"))?;
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).expect("4-byte slice");
        Ok(Self {
            scheme,
            rows: u32::from_le_bytes(word(1)),
            cols: u32::from_le_bytes(word(5)),
            scale: f32::from_le_bytes(word(9)),
            payload: bytes[HEADER_BYTES..].to_vec(),
        })
    }
}

fn encode_raw(block: &KvBlock) -> Vec<u8> {
    block
        .values()
        .iter()
        .flat_map(|&v| f16::from_f64(v).to_le_bytes())
        .collect()
}

/// Runs the stages implied by `scheme`. If the encoded payload is not
/// smaller than the FP16 payload, or the RLE stage expands the delta stream,
/// the block is stored as [`Scheme::Raw`].
pub fn compress(block: &KvBlock, scheme: Scheme) -> CompressedBlock {
    let q = quantize(block);
    let payload = match scheme {
        Scheme::Raw => None,
        Scheme::Int8 => Some(q.codes.iter().map(|&c| c as u8).collect::<Vec<u8>>()),
        Scheme::Int8Delta => Some(delta_encode(&q.codes, q.cols)),
        Scheme::Int8DeltaRle => {
            let deltas = delta_encode(&q.codes, q.cols);
            let runs = rle_encode(&deltas);
            (runs.len() < deltas.len()).then_some(runs)
        }
    };
    let (scheme, payload) = match payload {
        Some(p) if p.len() < block.raw_bytes() => (scheme, p),
        _ => (Scheme::Raw, encode_raw(block)),
    };
    CompressedBlock {
        scheme,
        rows: block.rows() as u32,
        cols: block.cols() as u32,
        scale: q.scale,
        payload,
    }
}

/// Inverse of [`compress`]. Raw payloads decode bit-identically; other
/// schemes yield `dequantize` of the exact INT8 matrix.
pub fn decompress(cb: &CompressedBlock) -> Result<KvBlock, CodecError> {
    let rows = cb.rows as usize;
    let cols = cb.cols as usize;
    if rows == 0 || cols == 0 {
        return Err(CodecError::Corrupt("zero dimension"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or(CodecError::Corrupt("dimension overflow"))?;
    if !cb.scale.is_finite() || cb.scale < 0.0 {
        return Err(CodecError::Corrupt("invalid scale"));
    }
    let codes: Vec<i8> = match cb.scheme {
        Scheme::Raw => {
            if cb.payload.len() != n * 2 {
                return Err(CodecError::Corrupt("raw payload length mismatch"));
            }
            let values = cb
                .payload
                .chunks_exact(2)
                .map(|p| f64::from(f16::from_le_bytes([p[0], p[1]])))
                .collect::<Vec<_>>();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CodecError::Corrupt("raw payload holds non-finite FP16"));
            }
            return Ok(KvBlock::from_parts(rows, cols, values));
        }
        Scheme::Int8 => {
            if cb.payload.len() != n {
                return Err(CodecError::Corrupt("int8 payload length mismatch"));
            }
            cb.payload.iter().map(|&b| b as i8).collect()
        }
        Scheme::Int8Delta => {
            if cb.payload.len() != n {
                return Err(CodecError::Corrupt("delta payload length mismatch"));
            }
            delta_decode(&cb.payload, cols)?
        }
        Scheme::Int8DeltaRle => {
            let deltas = rle_decode(&cb.payload)?;
            if deltas.len() != n {
                return Err(CodecError::Corrupt("RLE payload expands to the wrong length"));
            }
            delta_decode(&deltas, cols)?
        }
    };
    if codes.contains(&i8::MIN) {
        return Err(CodecError::Corrupt("code outside [-127, 127]"));
    }
    Ok(dequantize(&Quantized {
        scale: cb.scale,
        rows,
        cols,
        codes,
    }))
}

/// Original bytes over stored bytes (payload + header) for `scheme`.
pub fn measure_ratio(block: &KvBlock, scheme: Scheme) -> f64 {
    compress(block, scheme).ratio()
}

/// `1 - RMS(x - x̂) / RMS(x)`, clamped to `[0, 1]`. A zero block scores 1.
pub fn reconstruction_quality(original: &KvBlock, recon: &KvBlock) -> f64 {
    let (mut err, mut sig) = (0.0f64, 0.0f64);
    for (&x, &y) in original.values().iter().zip(recon.values()) {
        err += (x - y) * (x - y);
        sig += x * x;
    }
    if sig == 0.0 {
        return if err == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - (err / sig).sqrt()).clamp(0.0, 1.0)
}

/// Tracks how often a requested scheme was replaced by the raw bypass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BypassStats {
    pub blocks: u64,
    pub bypassed: u64,
    pub original_bytes: u64,
    pub stored_bytes: u64,
}

impl BypassStats {
    pub fn record(&mut self, requested: Scheme, cb: &CompressedBlock) {
        self.blocks += 1;
        if requested != Scheme::Raw && cb.scheme == Scheme::Raw {
            self.bypassed += 1;
        }
        self.original_bytes += cb.original_bytes() as u64;
        self.stored_bytes += cb.stored_bytes() as u64;
    }

    /// Fraction of blocks that took the bypass (α).
    pub fn alpha(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.bypassed as f64 / self.blocks as f64
        }
    }

    pub fn ratio(&self) -> f64 {
        if self.stored_bytes == 0 {
            1.0
        } else {
            self.original_bytes as f64 / self.stored_bytes as f64
        }
    }
}
