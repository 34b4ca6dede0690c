//! XSSL checkpoint container.
//!
//! Layout, little-endian: magic `XSSL`, version u32, 32-byte config digest,
//! record count u32, then per record: name length u16, name bytes, rank u8,
//! one u32 per extent, f64 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XSSL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(digest: &[u8; 32], store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(48 + store.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("parameter name too long: {name}")));
        }
        if t.shape().len() > u8::MAX as usize {
            return Err(Error::invalid(format!("{name} has too many dimensions")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::invalid(format!("{name} extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, digest: &[u8; 32], store: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(digest, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: format!("checkpoint {what} at byte {}", self.pos),
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<([u8; 32], ParamStore)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected XSSL".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let digest: [u8; 32] = c.take(32, "digest")?.try_into().expect("32 bytes");
    let count = c.u32("record count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let nlen = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.push(name, Tensor::new(shape, data)?).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok((digest, store))
}

pub fn read_checkpoint(path: &Path) -> Result<([u8; 32], ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bits() {
        let mut s = ParamStore::new();
        s.push("a.w", Tensor::matrix(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300])).unwrap();
        s.push("t", Tensor::scalar(7.0)).unwrap();
        let bytes = encode_checkpoint(&[9; 32], &s).unwrap();
        let (d, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(d, [9; 32]);
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn truncation_and_magic() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = encode_checkpoint(&[0; 32], &s).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(decode_checkpoint(&bad).unwrap_err(), Error::Format { offset: 0, .. }));
    }
}
