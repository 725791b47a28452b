//! Byte run-length coding as `(value, run)` pairs with `run` in `1..=255`.

use super::CodecError;

pub fn rle_encode(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut iter = bytes.iter().copied();
    let Some(mut cur) = iter.next() else {
        return out;
    };
    let mut run = 1u8;
    for b in iter {
        if b == cur && run < u8::MAX {
            run += 1;
        } else {
            out.extend_from_slice(&[cur, run]);
            cur = b;
            run = 1;
        }
    }
    out.extend_from_slice(&[cur, run]);
    out
}

pub fn rle_decode(bytes: &[u8]) -> Result<Vec<u8>, CodecError> {
    if !bytes.len().is_multiple_of(2) {
        return Err(CodecError::Corrupt("RLE stream has odd length"));
    }
    let total: usize = bytes.chunks_exact(2).map(|p| usize::from(p[1])).sum();
    let mut out = Vec::with_capacity(total);
    for pair in bytes.chunks_exact(2) {
        if pair[1] == 0 {
            return Err(CodecError::Corrupt("RLE run length of zero"));
        }
        out.extend(std::iter::repeat_n(pair[0], usize::from(pair[1])));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(rle_encode(&[0, 0, 0, 0]), vec![0x00, 0x04]);
        assert_eq!(rle_encode(&[1, 2, 2]), vec![0x01, 0x01, 0x02, 0x02]);
        assert_eq!(rle_encode(&[0u8; 300]), vec![0x00, 0xFF, 0x00, 0x2D]);
    }

    #[test]
    fn inverse_of_examples() {
        assert_eq!(rle_decode(&[0x00, 0x04]).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(rle_decode(&[0x01, 0x01, 0x02, 0x02]).unwrap(), vec![1, 2, 2]);
        assert_eq!(rle_decode(&[0x00, 0xFF, 0x00, 0x2D]).unwrap(), vec![0u8; 300]);
    }

    #[test]
    fn run_of_exactly_255() {
        assert_eq!(rle_encode(&[7u8; 255]), vec![7, 255]);
        assert_eq!(rle_encode(&[7u8; 256]), vec![7, 255, 7, 1]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(rle_decode(&[1]).is_err());
        assert!(rle_decode(&[1, 0]).is_err());
        assert_eq!(rle_decode(&[]).unwrap(), Vec::<u8>::new());
    }
}
