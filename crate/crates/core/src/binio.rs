//! Little-endian container helpers shared by the model and checkpoint files:
//! a byte writer, a section-aware reader and the CRC32 trailer.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn len32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Export(format!("length {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn i8s(&mut self, v: &[i8]) {
        self.buf.extend(v.iter().map(|&x| x as u8));
    }
    pub fn i32s(&mut self, v: &[i32]) {
        v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }
    pub fn u64s(&mut self, v: &[u64]) {
        v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }
    pub fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes()));
    }

    /// Append the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    pub section: String,
}

macro_rules! read_le {
    ($name:ident, $t:ty) => {
        pub fn $name(&mut self) -> Result<$t> {
            let b = self.take(std::mem::size_of::<$t>())?;
            Ok(<$t>::from_le_bytes(b.try_into().unwrap()))
        }
    };
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            section: "header".into(),
        }
    }

    pub fn enter(&mut self, section: impl Into<String>) {
        self.section = section.into();
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::UnexpectedEof {
                section: self.section.clone(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    read_le!(u8, u8);
    read_le!(u16, u16);
    read_le!(u32, u32);
    read_le!(u64, u64);

    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn i8s(&mut self, n: usize) -> Result<Vec<i8>> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }

    pub fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.eof())?)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.eof())?)?;
        Ok(b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.eof())?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn eof(&self) -> Error {
        Error::UnexpectedEof {
            section: self.section.clone(),
        }
    }

    pub fn format_err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.section, msg)
    }

    /// Read the trailing CRC32 and compare it with the bytes before it; the
    /// trailer must be the last four bytes.
    pub fn finish(mut self) -> Result<()> {
        let body_end = self.pos;
        self.enter("crc32 trailer");
        let stored = self.u32()?;
        if self.remaining() != 0 {
            return Err(self.format_err(format!("{} trailing bytes after CRC", self.remaining())));
        }
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if stored != computed {
            return Err(Error::Integrity {
                section: "crc32 trailer (covers whole file)".into(),
                stored,
                computed,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_matches_ieee_check_value() {
        // standard CRC-32/IEEE check value
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn reader_reports_section_on_eof() {
        let mut w = Writer::default();
        w.u32(7);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes[..6]);
        r.enter("layers");
        assert_eq!(r.u32().unwrap(), 7);
        match r.u32() {
            Err(Error::UnexpectedEof { section }) => assert_eq!(section, "layers"),
            other => panic!("{other:?}"),
        }
    }
}
