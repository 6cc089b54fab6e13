//! Binary feature file, little-endian:
//!
//! ```text
//! magic      8 bytes  "FFUSE\0v1"
//! frames     u32
//! dims       u32
//! stride_ms  f32
//! payload    frames * dims f32, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const MAGIC: &[u8; 8] = b"FFUSE\0v1";
const HEADER_LEN: usize = 8 + 4 + 4 + 4;

pub fn encode_features(x: &FeatureMatrix) -> Result<Vec<u8>> {
    let frames = u32::try_from(x.frames())
        .map_err(|_| Error::InvalidConfig(format!("too many frames: {}", x.frames())))?;
    let dims = u32::try_from(x.dims())
        .map_err(|_| Error::InvalidConfig(format!("too many dims: {}", x.dims())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + x.frames() * x.dims() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&frames.to_le_bytes());
    buf.extend_from_slice(&dims.to_le_bytes());
    buf.extend_from_slice(&(x.stride_ms() as f32).to_le_bytes());
    for ((row, col), &v) in x.data().indexed_iter() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite { row, col, value: v });
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::UnrecognizedFormat(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let word = |at: usize| -> [u8; 4] { bytes[at..at + 4].try_into().expect("4 bytes") };
    let frames = u32::from_le_bytes(word(8)) as usize;
    let dims = u32::from_le_bytes(word(12)) as usize;
    let stride_ms = f32::from_le_bytes(word(16)) as f64;

    let payload = &bytes[HEADER_LEN..];
    let expected = frames as u64 * dims as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(frames * dims);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteInFile {
                path: path.to_path_buf(),
                index,
            });
        }
        values.push(v as f64);
    }
    let data = Array2::from_shape_vec((frames, dims), values).map_err(|_| Error::Empty {
        rows: frames,
        cols: dims,
    })?;
    FeatureMatrix::new(data, stride_ms)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    decode_features(&fs::read(path)?, path)
}

/// Values are stored as `f32`; matrices read from a feature file round-trip
/// bit for bit.
pub fn write_feature_file(path: impl AsRef<Path>, x: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_features(x)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let x = FeatureMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], 10.0).unwrap();
        let bytes = encode_features(&x).unwrap();
        assert_eq!(&bytes[..8], b"FFUSE\0v1");
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &10.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[40..44], &6.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 24);
    }

    #[test]
    fn decode_errors() {
        let p = Path::new("x.bin");
        let mut bad = b"XXXXXXXX".to_vec();
        bad.extend_from_slice(&[0; 12]);
        assert!(matches!(
            decode_features(&bad, p),
            Err(Error::UnrecognizedFormat(_))
        ));

        let x = FeatureMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], 10.0).unwrap();
        let bytes = encode_features(&x).unwrap();
        let truncated = &bytes[..20 + 20];
        match decode_features(truncated, p) {
            Err(Error::CorruptFile {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (24, 20));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut nan = bytes.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_features(&nan, p),
            Err(Error::NonFiniteInFile { index: 1, .. })
        ));
    }

    #[test]
    fn values_beyond_f32_range_are_rejected() {
        let x = FeatureMatrix::new(array![[1e300]], 10.0).unwrap();
        assert!(encode_features(&x).is_err());
    }
}
