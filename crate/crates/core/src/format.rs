//! Binary container shared by checkpoints and dataset blobs:
//!
//! ```text
//! magic [8] | version u32 | body_len u64 | body [body_len] | crc64 u64
//! ```
//!
//! All integers little-endian. The CRC (CRC-64/ECMA-182) covers every byte
//! before it.

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);
const HEADER_LEN: usize = 8 + 4 + 8;

pub(crate) fn encode(magic: &[u8; 8], version: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let sum = CRC64.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Validates magic, version, length and checksum, in that order, and returns the body.
pub(crate) fn decode<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
    kind: &'static str,
) -> Result<&'a [u8]> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: kind,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: "header".into(),
        });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: version,
        });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let total = HEADER_LEN + body_len + 8;
    if bytes.len() < total {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: format!("expected {total} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > total {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - total),
        });
    }
    let stored = u64::from_le_bytes(bytes[total - 8..].try_into().expect("8 bytes"));
    let computed = CRC64.checksum(&bytes[..total - 8]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(&bytes[HEADER_LEN..HEADER_LEN + body_len])
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Default)]
pub(crate) struct BodyWriter {
    pub buf: Vec<u8>,
}

impl BodyWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn f32s(&mut self, vals: &[f32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    pub fn u32s(&mut self, vals: &[u32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct BodyReader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.format_err(format!("{what}: invalid UTF-8")))
    }
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    pub fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.format_err(format!("{} unread bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
    pub fn format_err(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg,
        }
    }
}
