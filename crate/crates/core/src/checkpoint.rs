//! Binary container shared by backbone and head checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     6 bytes  "MAEKIT"
//! version   u16      FORMAT_VERSION
//! hdr_len   u32      byte length of the header
//! header    UTF-8    "key=value\n" lines sorted by key
//! count     u32      number of tensors
//! per tensor, sorted by name:
//!   name_len u32, name bytes, rank u32, rank x u32 dims,
//!   prod(dims) x f32 values (IEEE-754)
//! ```
//!
//! The header always carries a `kind` key (`mae`, `head-linear`,
//! `head-segment`) plus the configuration needed to rebuild the module.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"MAEKIT";
pub const FORMAT_VERSION: u16 = 1;

pub type Header = BTreeMap<String, String>;

pub fn encode<T: Scalar>(header: &Header, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&v.to_f32_le());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Header, ParamStore<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(6, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "MAEKIT"
        )));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hdr_len = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(hdr_len, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut header = Header::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.insert(name, Param { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((header, params))
}

pub fn save<T: Scalar>(path: &Path, header: &Header, params: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(header, params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Header, ParamStore<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of the encoded container.
pub fn digest<T: Scalar>(header: &Header, params: &ParamStore<T>) -> String {
    hex::encode(Sha256::digest(encode(header, params)))
}

pub(crate) fn header_value<'a>(h: &'a Header, key: &str) -> Result<&'a str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header is missing {key:?}")))
}

pub(crate) fn header_usize(h: &Header, key: &str) -> Result<usize> {
    header_value(h, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("header value for {key:?} is not an integer")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Header, ParamStore<f32>) {
        let mut h = Header::new();
        h.insert("kind".into(), "test".into());
        let mut p = ParamStore::new();
        p.insert("w", Param::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-7]).unwrap());
        p.insert("b", Param::new(vec![1], vec![0.5]).unwrap());
        (h, p)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (h, p) = sample();
        let bytes = encode(&h, &p);
        let (h2, p2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, p2);
        assert_eq!(encode(&h2, &p2), bytes);
        assert_eq!(&bytes[..6], b"MAEKIT");
    }

    #[test]
    fn every_truncation_is_a_checkpoint_error() {
        let (h, p) = sample();
        let bytes = encode(&h, &p);
        for cut in 0..bytes.len() {
            match decode::<f32>(&bytes[..cut]) {
                Err(Error::Checkpoint(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let (h, p) = sample();
        let mut bytes = encode(&h, &p);
        bytes[0] = b'X';
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode(&h, &p);
        bytes[6] = 9;
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("version"));
    }
}
