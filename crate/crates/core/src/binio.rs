//! Little-endian binary container shared by every on-disk format.
//!
//! Layout: magic `OTTS`, `u32` format version, `u32` payload kind, payload.
//! Readers report the byte offset of the first malformed field.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"OTTS";

/// What a binary file contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub(crate) enum Kind {
    Encoder = 1,
    TrainState = 2,
    Corpus = 3,
    DistanceMatrix = 4,
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind, version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(version);
        w.u32(kind as u32);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Check magic, version and kind; return a reader positioned at the payload.
    pub fn open(data: &'a [u8], kind: Kind, version: u32) -> Result<Self> {
        let mut r = Self { data, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error_at(0, "bad magic bytes, not an OTTS file"));
        }
        let found = r.u32("format version")?;
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        let at = r.pos;
        let k = r.u32("payload kind")?;
        if k != kind as u32 {
            return Err(r.error_at(at, &format!("payload kind {k}, expected {}", kind as u32)));
        }
        Ok(r)
    }

    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Parse { offset: offset as u64, message: message.to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error_at(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A length field, bounded by the bytes left so corrupt headers cannot
    /// trigger huge allocations. `unit` is the minimum encoded size per element.
    pub fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let remaining = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > remaining {
            return Err(self.error_at(at, &format!("{what} {n} exceeds remaining file size")));
        }
        Ok(n as usize)
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what, 1)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error_at(at, &format!("{what} is not UTF-8")))
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Fail with a positioned error built from `message`.
    pub fn fail(&self, offset: usize, message: &str) -> Error {
        self.error_at(offset, message)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error_at(self.pos, "trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename, so an
/// interrupted write never leaves a half-written file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name =
        path.file_name().ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => tmp_name.into(),
    };
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut w = Writer::new(Kind::Encoder, 3);
        w.u8(7);
        w.f64(-0.0);
        w.str("héllo");
        let bytes = w.into_bytes();
        let mut r = Reader::open(&bytes, Kind::Encoder, 3).unwrap();
        assert_eq!(r.u8("a").unwrap(), 7);
        assert_eq!(r.f64("b").unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.str("c").unwrap(), "héllo");
        r.finish().unwrap();

        assert!(matches!(
            Reader::open(&bytes, Kind::Encoder, 4),
            Err(Error::Version { found: 3, expected: 4 })
        ));
        assert!(matches!(Reader::open(&bytes, Kind::Corpus, 3), Err(Error::Parse { offset: 8, .. })));
        let mut r = Reader::open(&bytes[..14], Kind::Encoder, 3).unwrap();
        r.u8("a").unwrap();
        assert!(matches!(r.f64("b"), Err(Error::Parse { offset: 13, .. })));
        assert!(matches!(Reader::open(b"NOPE", Kind::Encoder, 3), Err(Error::Parse { offset: 0, .. })));
    }
}
