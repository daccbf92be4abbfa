//! Weight files.
//!
//! Layout:
//!
//! ```text
//! u64 LE   header length in bytes
//! JSON     {"format": "conic-vp-weights", "version": 1, "tensors": [
//!             {"name", "shape": [n, c, h, w], "dtype": "f32" | "f64",
//!              "offset": <bytes from the start of the data section>,
//!              "trainable": bool}, ...]}
//! data     each tensor's values, little-endian, in header order
//! ```
//!
//! Only values are stored; gradients and optimizer moments are not.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Param, Shape4};

const FORMAT: &str = "conic-vp-weights";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeader {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

/// Serializes parameter values; identical parameters give identical bytes.
pub fn encode_params<T: Scalar>(params: &[&Param<T>]) -> Vec<u8> {
    let size = dtype_size(T::DTYPE).expect("known dtype");
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|p| {
            let s = p.tensor.shape();
            let entry = TensorEntry {
                name: p.name.clone(),
                shape: [s.n, s.c, s.h, s.w],
                dtype: T::DTYPE.to_string(),
                offset,
                trainable: p.trainable,
            };
            offset += (p.len() * size) as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&WeightHeader {
        format: FORMAT.into(),
        version: VERSION,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for v in p.value() {
            match size {
                4 => out.extend_from_slice(&v.to_f32().expect("finite").to_le_bytes()),
                _ => out.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    out
}

pub fn save_params<T: Scalar>(path: &Path, params: &[&Param<T>]) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

/// Splits a weight file into its header and data section.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(WeightHeader, &[u8]), String> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or("file shorter than its length prefix")?
        .try_into()
        .expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + len).ok_or("truncated header")?;
    let header: WeightHeader = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(format!(
            "unsupported weight file {} v{} (expected {FORMAT} v{VERSION})",
            header.format, header.version
        ));
    }
    Ok((header, &bytes[8 + len..]))
}

/// Overwrites `params` from `bytes`. Names, order and shapes must match
/// exactly; values are converted to `T`.
pub fn decode_params_into<T: Scalar>(bytes: &[u8], params: &mut [&mut Param<T>]) -> std::result::Result<(), String> {
    let (header, data) = decode_header(bytes)?;
    if header.tensors.len() != params.len() {
        return Err(format!(
            "file has {} tensors, model has {}",
            header.tensors.len(),
            params.len()
        ));
    }
    for (entry, p) in header.tensors.iter().zip(params.iter_mut()) {
        let s = p.tensor.shape();
        if entry.name != p.name || entry.shape != [s.n, s.c, s.h, s.w] {
            return Err(format!(
                "tensor {} {:?} does not match model tensor {} {}",
                entry.name, entry.shape, p.name, s
            ));
        }
        let size = dtype_size(&entry.dtype).ok_or_else(|| format!("unknown dtype {}", entry.dtype))?;
        let start = entry.offset as usize;
        let raw = data
            .get(start..start + p.len() * size)
            .ok_or_else(|| format!("data for {} is truncated", entry.name))?;
        let values = p.tensor.data_mut();
        for (v, chunk) in values.iter_mut().zip(raw.chunks_exact(size)) {
            *v = match size {
                4 => T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64),
                _ => T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes"))),
            };
        }
        debug_assert_eq!(Shape4::new(entry.shape[0], entry.shape[1], entry.shape[2], entry.shape[3]), s);
    }
    Ok(())
}

pub fn load_params_into<T: Scalar>(path: &Path, params: &mut [&mut Param<T>]) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params_into(&bytes, params).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> Vec<Param<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            Param::trainable("a", Tensor4::random_normal(Shape4::new(2, 3, 1, 1), 1.0, &mut rng)),
            Param::buffer("b", Tensor4::random_normal(Shape4::new(1, 1, 1, 4), 1.0, &mut rng)),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let src = params(1);
        let bytes = encode_params(&src.iter().collect::<Vec<_>>());
        let mut dst = params(2);
        decode_params_into(&bytes, &mut dst.iter_mut().collect::<Vec<_>>()).unwrap();
        for (a, b) in src.iter().zip(&dst) {
            assert_eq!(a.value(), b.value());
        }
        let again = encode_params(&dst.iter().collect::<Vec<_>>());
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_is_readable_json() {
        let src = params(1);
        let bytes = encode_params(&src.iter().collect::<Vec<_>>());
        let (header, data) = decode_header(&bytes).unwrap();
        assert_eq!(header.tensors[1].offset, 24);
        assert_eq!(data.len(), 40);
        assert!(!header.tensors[1].trainable);
    }

    #[test]
    fn mismatches_are_rejected() {
        let src = params(1);
        let bytes = encode_params(&src.iter().collect::<Vec<_>>());
        let mut renamed = params(1);
        renamed[0].name = "z".into();
        assert!(decode_params_into(&bytes, &mut renamed.iter_mut().collect::<Vec<_>>()).is_err());
        let mut short = params(1);
        short.pop();
        assert!(decode_params_into(&bytes, &mut short.iter_mut().collect::<Vec<_>>()).is_err());
        assert!(decode_params_into(&bytes[..bytes.len() - 1], &mut params(1).iter_mut().collect::<Vec<_>>()).is_err());
        assert!(decode_header(&[1, 2, 3]).is_err());
    }
}
