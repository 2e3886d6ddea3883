//! Versioned sectioned binary container shared by dataset and checkpoint
//! files.
//!
//! Layout, all integers little-endian:
//! `magic[8] | version u32 | count u32 | count x (name_len u16, name, len u64) | payloads`.
//! The table of contents comes first, so a truncated file can always be
//! reported by the name of the first section whose payload is incomplete.

use crate::error::{Error, Result};

pub(crate) struct ContainerWriter {
    magic: [u8; 8],
    version: u32,
    sections: Vec<(String, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new(magic: [u8; 8], version: u32) -> Self {
        Self {
            magic,
            version,
            sections: Vec::new(),
        }
    }

    pub fn section(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        }
        for (_, payload) in &self.sections {
            out.extend_from_slice(payload);
        }
        out
    }
}

pub(crate) struct Container<'a> {
    pub version: u32,
    what: &'static str,
    sections: Vec<(String, &'a [u8])>,
}

impl<'a> Container<'a> {
    pub fn parse(bytes: &'a [u8], magic: [u8; 8], what: &'static str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, what, "header");
        if r.take(8)? != magic {
            return Err(format_error(what, "bad magic bytes"));
        }
        let version = r.u32()?;
        r.section = "table of contents";
        let count = r.u32()? as usize;
        let mut toc = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| format_error(what, "section name is not UTF-8"))?;
            let size = r.u64()? as usize;
            toc.push((name, size));
        }
        let mut offset = r.pos;
        let mut sections = Vec::with_capacity(count);
        for (name, size) in toc {
            let end = offset
                .checked_add(size)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    format_error(
                        what,
                        format!("truncated: section '{name}' needs {size} bytes at offset {offset}"),
                    )
                })?;
            sections.push((name, &bytes[offset..end]));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(format_error(
                what,
                format!("{} trailing bytes", bytes.len() - offset),
            ));
        }
        Ok(Self {
            version,
            what,
            sections,
        })
    }

    pub fn get(&self, name: &str) -> Result<&'a [u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| *b)
            .ok_or_else(|| format_error(self.what, format!("missing section '{name}'")))
    }

    pub fn reader(&self, name: &'static str) -> Result<ByteReader<'a>> {
        Ok(ByteReader::new(self.get(name)?, self.what, name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }
}

pub(crate) fn format_error(what: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        what: what.to_string(),
        detail: detail.into(),
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
    section: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str, section: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
            section,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_error(
                self.what,
                format!("truncated in section '{}'", self.section),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| format_error(self.what, format!("non UTF-8 text in '{}'", self.section)))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_error(
                self.what,
                format!("unexpected trailing bytes in section '{}'", self.section),
            ));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}
