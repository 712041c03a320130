//! Flat binary container for named `f64` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CFLD" | version: u32 | count: u32
//! repeated count times:
//!     name_len: u32 | name: UTF-8 bytes | rank: u32 | extents: u64 × rank | values: f64 × Π extents
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFLD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic, expected CFLD"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail(name_at + 4, "name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let d = r.u64()?;
                if d == 0 || d > u32::MAX as u64 {
                    return Err(r.fail(at, format!("invalid extent {d}")));
                }
                shape.push(d as usize);
            }
            let n: usize = shape.iter().product();
            let data_at = r.pos;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail(data_at, "array too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ck.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after last array"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { what: "checkpoint", offset, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("a.weight", Tensor::from_fn([2, 3], |i| i as f64 - 0.5));
        ck.push("β", Tensor::scalar(-1.25));
        ck
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"CFLD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()), 2);
        // header 12 + (4+8+4+16+48) + (4+2+4+0+8)
        assert_eq!(bytes.len(), 12 + 80 + 18);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len() - 8),
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
