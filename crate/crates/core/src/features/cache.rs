//! Binary feature cache: `CAFE`, u32 frames, u32 dims, row-major f32 payload,
//! all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::mfcc::FeatureMatrix;
use crate::scalar::Scalar;

pub const CACHE_MAGIC: &[u8; 4] = b"CAFE";

pub fn encode_features<T: Scalar>(m: &FeatureMatrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.data.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(m.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_dims as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<FeatureMatrix<T>> {
    if bytes.len() < 12 {
        return Err(Error::Parse(format!("feature cache of {} bytes has no header", bytes.len())));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format("feature cache magic mismatch".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n_frames, n_dims) = (word(4), word(8));
    let payload = &bytes[12..];
    if payload.len() != 4 * n_frames * n_dims {
        return Err(Error::Parse(format!(
            "feature cache declares {n_frames}×{n_dims} but holds {} bytes",
            payload.len()
        )));
    }
    let data = payload.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
    FeatureMatrix::new(data, n_frames, n_dims)
}

pub fn write_features<T: Scalar>(path: impl AsRef<Path>, m: &FeatureMatrix<T>) -> Result<()> {
    std::fs::write(path, encode_features(m))?;
    Ok(())
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMatrix<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_exact() {
        let m = FeatureMatrix::new(vec![1.5f32, -2.25, 0.0, 3.0e-7, 8.0, 9.0], 3, 2).unwrap();
        let bytes = encode_features(&m);
        assert_eq!(&bytes[..4], b"CAFE");
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(decode_features::<f32>(&bytes).unwrap().data, m.data);
    }

    #[test]
    fn rejects_bad_input() {
        let m = FeatureMatrix::new(vec![1.0f64; 4], 2, 2).unwrap();
        let mut bytes = encode_features(&m);
        assert!(matches!(decode_features::<f64>(&bytes[..15]), Err(Error::Parse(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_features::<f64>(&bytes), Err(Error::Format(_))));
    }
}
