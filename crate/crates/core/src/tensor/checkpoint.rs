//! Binary checkpoint codec.
//!
//! Layout (little-endian): magic `PIDC`, u32 version, u32 entry count, then per
//! entry: u32 name length, UTF-8 name, u32 rank, rank × u32 extents, and the
//! f64 payload in row-major order. Entries are written in name order.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PIDC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new(0);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new(3);
        p.init_glorot("g.conv1.w", &[2, 3, 3, 3], 27, 18).unwrap();
        p.init_const("g.conv1.b", &[2], 0.0).unwrap();
        p.insert("s", Tensor::scalar(1.5)).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"PIDC");
        let q = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout() {
        let mut p = ParamStore::new(0);
        p.insert("ab", Tensor::from_vec(vec![1.0])).unwrap();
        let b = encode(&p);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(&b[16..18], b"ab");
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[22..26].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[26..34].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 34);
    }
}
