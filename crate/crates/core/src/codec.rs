//! Length-prefixed little-endian binary container.
//!
//! Layout: magic `MTLB`, u32 version, u64 record count, each record as a u64
//! byte length followed by its bytes, one length-prefixed trailer block, and
//! a CRC-32 of everything before it.
//! Datasets and checkpoints both use it; the trailer starts with a 4-byte tag
//! naming the payload kind.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTLB";
pub const VERSION: u32 = 2;

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
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

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated data: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }

    /// A count whose elements take at least `min_elem` bytes each; rejects counts the buffer cannot hold.
    pub fn len(&mut self, min_elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_elem.max(1)) > self.remaining() {
            return Err(Error::Format(format!("count {n} exceeds remaining {} bytes", self.remaining())));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid bool byte {b}"))),
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid utf-8 string".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub records: Vec<Vec<u8>>,
    pub trailer: Vec<u8>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.buf.extend_from_slice(MAGIC);
        e.u32(VERSION);
        e.usize(self.records.len());
        for r in &self.records {
            e.bytes(r);
        }
        e.bytes(&self.trailer);
        let crc = crc32fast::hash(&e.buf);
        e.u32(crc);
        e.finish()
    }

    /// Decodes the whole buffer; nothing is returned unless every byte checks out.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(buf);
        let magic = d.take(4).map_err(|_| Error::Format("file too short for header".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = d.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = d.len(8)?;
        let records = (0..count).map(|_| d.bytes().map(<[u8]>::to_vec)).collect::<Result<Vec<_>>>()?;
        let trailer = d.bytes()?.to_vec();
        let body = buf.len() - d.remaining();
        let stored = d.u32()?;
        d.expect_end()?;
        let actual = crc32fast::hash(&buf[..body]);
        if stored != actual {
            return Err(Error::Format(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        Ok(Self { records, trailer })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let c = Container {
            records: vec![vec![1, 2, 3], vec![]],
            trailer: b"TAIL".to_vec(),
        };
        let bytes = c.encode();
        assert_eq!(Container::decode(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::decode(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(Container::decode(&v2).unwrap_err().to_string().contains("version"));
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(Container::decode(&flipped).unwrap_err().to_string().contains("checksum"));
    }
}
