//! Shared primitives for the binary file formats (model and index files):
//! 4-byte magic, little-endian integers, and a CRC32 trailer over the
//! payload between magic and checksum.

use crate::error::{Error, Result};

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    name: &'static str,
}

impl<'a> Reader<'a> {
    /// Validates magic and checksum, returning a cursor over the payload.
    /// Bytes after the checksum are permitted (training-state trailers).
    pub fn open(
        data: &'a [u8],
        magic: &[u8; 4],
        supported_version: u16,
        name: &'static str,
    ) -> Result<(Reader<'a>, usize)> {
        if data.len() < 10 {
            return Err(Error::Truncated(format!("{name}: {} bytes", data.len())));
        }
        if &data[..4] != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&data[..4.min(data.len())]).into_owned(),
            });
        }
        let mut r = Reader { data, pos: 4, name };
        let version = r.u16()?;
        if version > supported_version {
            return Err(Error::VersionMismatch { found: version, supported: supported_version });
        }
        Ok((r, version as usize))
    }

    /// Verifies the CRC32 stored at `end..end+4` against payload `4..end`.
    pub fn verify_crc(&self, end: usize) -> Result<()> {
        if self.data.len() < end + 4 {
            return Err(Error::Truncated(format!(
                "{}: missing checksum trailer",
                self.name
            )));
        }
        let stored = u32::from_le_bytes(self.data[end..end + 4].try_into().unwrap());
        let computed = crc32fast::hash(&self.data[4..end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated(format!(
                "{}: wanted {n} bytes at offset {}, file has {}",
                self.name,
                self.pos,
                self.data.len()
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32_slice(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn utf8(&mut self, len: usize) -> Result<&'a str> {
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes).map_err(|_| Error::Validation(format!(
            "{}: invalid UTF-8 text block",
            self.name
        )))
    }
}

/// Payload buffer; magic and CRC are added by [`Writer::finish`].
pub struct Writer {
    magic: [u8; 4],
    payload: Vec<u8>,
}

impl Writer {
    pub fn new(magic: [u8; 4], version: u16) -> Writer {
        let mut w = Writer { magic, payload: Vec::new() };
        w.u16(version);
        w
    }

    pub fn u16(&mut self, v: u16) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, values: impl IntoIterator<Item = f32>) {
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.payload.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.payload);
        let mut out = Vec::with_capacity(4 + self.payload.len() + 4);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map_or("out".into(), |n| n.to_string_lossy())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
