//! Named-array checkpoints.
//!
//! Layout (little-endian): `PKTN`, version `u32`, array count `u32`, then per
//! array: name length `u16`, UTF-8 name, rank `u8`, dims `u32 × rank`, data
//! `f32 × Π dims`.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{read_file, write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"PKTN";
pub const VERSION: u32 = 1;

pub type NamedArrays = Vec<(String, Tensor<f32>)>;

fn check_unique(arrays: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _) in arrays {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!("duplicate array name {name:?}")));
        }
    }
    Ok(())
}

pub fn encode(arrays: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    check_unique(arrays)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(arrays.len()).map_err(|_| Error::invalid("too many arrays"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in arrays {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("array name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<NamedArrays> {
    let mut r = Reader::new(bytes, "checkpoint");
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| r.error(at, format!("array name is not UTF-8: {e}")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(r.error(at, format!("duplicate array name {name:?}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(&dims, data).map_err(|e| r.error(at, format!("array {name:?}: {e}")))?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(r.error(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_checkpoint(arrays: &[(String, Tensor<f32>)], path: &Path) -> Result<()> {
    write_atomic(path, &encode(arrays)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NamedArrays> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_roundtrip() {
        let a = vec![("w".to_string(), Tensor::new(&[1], vec![-0.0f32]).unwrap())];
        let back = decode(&encode(&a).unwrap()).unwrap();
        assert_eq!(back[0].1.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn empty_list_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn structured_errors() {
        let a = vec![("w".to_string(), Tensor::new(&[2, 2], vec![1.0f32; 4]).unwrap())];
        let bytes = encode(&a).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset as usize >= 12), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode(&v2).unwrap_err().to_string().contains("version"));
        let dup = vec![a[0].clone(), a[0].clone()];
        assert!(encode(&dup).is_err());
    }
}
