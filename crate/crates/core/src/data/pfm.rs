//! Portable float map (single channel).
//!
//! Header `Pf\n{W} {H}\n{scale}\n`, followed by rows stored bottom to top as
//! 4-byte floats. A negative scale means little-endian, positive big-endian.
//! Files are written little-endian with scale -1.0.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn encode_pfm(map: &Array2<f32>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for row in map.outer_iter().rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let magic = token()?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::malformed(path, "three-channel PFM not supported")),
        other => return Err(Error::malformed(path, format!("bad magic {other:?}"))),
    }
    let w: usize = token()?
        .parse()
        .map_err(|_| Error::malformed(path, "bad width"))?;
    let h: usize = token()?
        .parse()
        .map_err(|_| Error::malformed(path, "bad height"))?;
    let scale: f32 = token()?
        .parse()
        .map_err(|_| Error::malformed(path, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::malformed(path, "scale must be nonzero"));
    }
    // exactly one whitespace byte separates the header from the data
    let data_start = pos + 1;
    let need = 4 * w * h;
    if bytes.len() < data_start + need {
        return Err(Error::malformed(
            path,
            format!("expected {need} data bytes, found {}", bytes.len().saturating_sub(data_start)),
        ));
    }
    let little = scale < 0.0;
    let data = &bytes[data_start..data_start + need];
    let mut map = Array2::<f32>::zeros((h, w));
    for (r, chunk) in data.chunks_exact(4 * w.max(1)).take(h).enumerate() {
        let row = h - 1 - r;
        for (c, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            map[[row, c]] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &Array2<f32>) -> Result<()> {
    std::fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_pfm(&m);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 4.0);
    }

    #[test]
    fn big_endian_decodes() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        let m = decode_pfm(&bytes, Path::new("be.pfm")).unwrap();
        assert_eq!(m.as_slice().unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_names_path() {
        let m = Array2::from_elem((4, 4), 1.0f32);
        let bytes = encode_pfm(&m);
        let err = decode_pfm(&bytes[..bytes.len() - 3], Path::new("/data/d.pfm")).unwrap_err();
        assert!(err.to_string().contains("/data/d.pfm"));
        assert!(matches!(err, Error::Malformed { .. }));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(decode_pfm(b"P6\n1 1\n255\n", Path::new("x")).is_err());
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n000000000000", Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let m = Array2::from_shape_fn((h, w), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((s >> 32) as u32)
            });
            let back = decode_pfm(&encode_pfm(&m), Path::new("p")).unwrap();
            let a: Vec<u32> = m.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
