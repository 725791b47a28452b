//! Row-wise delta coding over the mod-256 ring.
//!
//! Each row keeps its first code as a raw two's-complement byte; later bytes
//! hold `q[i] - q[i-1]` wrapped to 8 bits, which is exactly invertible.

use super::CodecError;

pub fn delta_encode(codes: &[i8], cols: usize) -> Vec<u8> {
    assert!(cols > 0, "delta_encode needs at least one column");
    let mut out = Vec::with_capacity(codes.len());
    for row in codes.chunks(cols) {
        let mut prev = 0u8;
        for (i, &c) in row.iter().enumerate() {
            let b = c as u8;
            out.push(if i == 0 { b } else { b.wrapping_sub(prev) });
            prev = b;
        }
    }
    out
}

pub fn delta_decode(bytes: &[u8], cols: usize) -> Result<Vec<i8>, CodecError> {
    if cols == 0 || !bytes.len().is_multiple_of(cols) {
        return Err(CodecError::Corrupt("delta stream length is not a whole number of rows"));
    }
    let mut out = Vec::with_capacity(bytes.len());
    for row in bytes.chunks(cols) {
        let mut acc = 0u8;
        for (i, &b) in row.iter().enumerate() {
            acc = if i == 0 { b } else { acc.wrapping_add(b) };
            out.push(acc as i8);
        }
    }
    Ok(out)
}
