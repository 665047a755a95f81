//! `TSTF` feature files: magic `TSTF`, `u32` version 1, `u32` rank, one `u64`
//! per extent, then the row-major payload as `f32`, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{Resolution, Spectrogram};

const MAGIC: &[u8; 4] = b"TSTF";
const VERSION: u32 = 1;

pub fn encode(shape: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a feature payload into its shape and values; `path` only labels
/// errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bad = |reason: &str| Error::format(path, reason);
    let word = |at: usize| -> Result<u32> {
        let b = bytes.get(at..at + 4).ok_or_else(|| bad("truncated header"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing TSTF magic"));
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let ndim = word(8)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(bad(&format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 12 + 8 * i;
        let b = bytes.get(at..at + 8).ok_or_else(|| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| bad("zero or overflowing extents"))?;
    let payload = &bytes[12 + 8 * ndim..];
    if payload.len() != 4 * numel {
        return Err(bad(&format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), 4 * numel)));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((shape, values))
}

pub fn write_features(path: &Path, s: &Spectrogram) -> Result<()> {
    fs::write(path, encode(&[s.n_frames(), s.dims()], s.values())).map_err(|e| Error::io(path, e))
}

/// Reads a `[T, D]` feature file as a high-resolution 10 ms spectrogram.
pub fn read_features(path: &Path) -> Result<Spectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (shape, values) = decode(&bytes, path)?;
    if shape.len() != 2 {
        return Err(Error::format(path, format!("expected a T x D matrix, found shape {shape:?}")));
    }
    Spectrogram::new(values, shape[0], shape[1], 10.0, Resolution::High)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let b = encode(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.5]);
        assert_eq!(&b[..4], b"TSTF");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[b.len() - 4..], &5.5f32.to_le_bytes());
        let (shape, v) = decode(&b, Path::new("x")).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(v[5], 5.5);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let mut b = encode(&[2, 2], &[1.0; 4]);
        assert!(matches!(decode(&b[..b.len() - 1], Path::new("x")), Err(Error::Format { .. })));
        b[0] = b'X';
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Format { .. })));
    }
}
