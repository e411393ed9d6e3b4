//! Binary tensor checkpoints (`HTOK`) and latent files (`HLAT`).
//!
//! Checkpoint layout, all integers little-endian:
//! magic `HTOK`, version `u32`, tensor count `u32`, then per tensor the
//! name length `u32`, name bytes, dtype code `u8`, rank `u32`, dims `u64`
//! each, and the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HTOK";
pub const LATENT_MAGIC: [u8; 4] = *b"HLAT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(ps: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((ps.len() as u32).to_le_bytes());
    for (name, t) in ps.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(DType::F64 as u8);
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Byte cursor that reports truncation as expected-vs-available totals.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.buf.len() {
            return Err(Error::Truncated { expected: end as u64, available: self.buf.len() as u64 });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion { expected: FORMAT_VERSION, found: version });
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut ps = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::invalid("tensor name is not UTF-8"))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            x if x == DType::F64 as u8 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            x if x == DType::F32 as u8 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(Error::invalid(format!("unknown dtype code {other} for `{name}`"))),
        };
        ps.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(ps)
}

pub fn save_checkpoint(ps: &ParameterSet, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ps)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Checks `loaded` against a freshly initialized `expected` set: same
/// names, same shapes. The first offending name is reported.
pub fn validate_against(loaded: &ParameterSet, expected: &ParameterSet) -> Result<()> {
    for (name, t) in expected.iter() {
        let l = loaded.get(name).map_err(|_| Error::MissingTensor(name.to_string()))?;
        if l.shape() != t.shape() {
            return Err(Error::TensorShape { name: name.to_string(), expected: t.shape().to_vec(), found: l.shape().to_vec() });
        }
    }
    if let Some(extra) = loaded.names().find(|n| !expected.contains(n)) {
        return Err(Error::UnexpectedTensor(extra.to_string()));
    }
    Ok(())
}

/// Latent sequence on disk: magic, version, frame rate, latent dim, frame
/// count, then `f32` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    pub frame_rate: u32,
    pub latent_dim: u32,
    pub frames: Tensor<f64>,
}

impl LatentFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(LATENT_MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.frame_rate.to_le_bytes());
        out.extend(self.latent_dim.to_le_bytes());
        out.extend((self.frames.shape()[0] as u32).to_le_bytes());
        for &v in self.frames.data() {
            out.extend((v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.magic(LATENT_MAGIC)?;
        let frame_rate = r.u32()?;
        let latent_dim = r.u32()?;
        let n = r.u32()? as usize;
        if frame_rate == 0 || latent_dim == 0 {
            return Err(Error::invalid("corrupt latent header: zero frame rate or dimension"));
        }
        let d = latent_dim as usize;
        let data = r
            .take(n * d * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::invalid("corrupt latent file: trailing bytes"));
        }
        Ok(Self { frame_rate, latent_dim, frames: Tensor::new(vec![n, d], data)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap()).unwrap();
        ps.insert("b", Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn round_trip_and_truncation() {
        let ps = sample();
        let bytes = encode_checkpoint(&ps);
        assert_eq!(decode_checkpoint(&bytes).unwrap().fingerprint(""), ps.fingerprint(""));
        match decode_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated { expected, available }) => {
                assert_eq!((expected, available), (bytes.len() as u64, bytes.len() as u64 - 3));
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadVersion { found: 9, .. })));
    }

    #[test]
    fn latent_header() {
        let lf = LatentFile { frame_rate: 125, latent_dim: 2, frames: Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap() };
        let back = LatentFile::decode(&lf.encode()).unwrap();
        assert_eq!(back, lf);
        let mut bytes = lf.encode();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(LatentFile::decode(&bytes).is_err());
    }
}
