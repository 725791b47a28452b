//! Per-block symmetric INT8 quantization.

use super::KvBlock;

/// Largest quantized magnitude.
pub const QMAX: i32 = 127;

/// A quantized block: one scale for the whole block plus row-major INT8 codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub scale: f32,
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
}

/// `s = max|x| / 127`, `q = round_half_away(x / s)`.
///
/// The scale is rounded to `f32` first and the codes are derived from the
/// stored value, so `|x - q·s| <= s/2` holds against the header scale.
pub fn quantize(block: &KvBlock) -> Quantized {
    let max_abs = block.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = (max_abs / f64::from(QMAX)) as f32;
    let codes = if scale == 0.0 {
        vec![0i8; block.len()]
    } else {
        let s = f64::from(scale);
        block
            .values()
            .iter()
            .map(|&x| {
                // f64::round is half-away-from-zero.
                let q = (x / s).round() as i32;
                q.clamp(-QMAX, QMAX) as i8
            })
            .collect()
    };
    Quantized {
        scale,
        rows: block.rows(),
        cols: block.cols(),
        codes,
    }
}

/// `x̂ = q · s`, evaluated exactly in `f64`.
pub fn dequantize(q: &Quantized) -> KvBlock {
    let s = f64::from(q.scale);
    let values = q.codes.iter().map(|&c| f64::from(c) * s).collect();
    KvBlock::from_parts(q.rows, q.cols, values)
}
