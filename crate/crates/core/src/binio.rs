//! Little-endian binary reading with byte-offset error reporting.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

macro_rules! read_le {
    ($name:ident, $ty:ty) => {
        pub(crate) fn $name(&mut self, what: &str) -> Result<$ty> {
            let bytes = self.take(std::mem::size_of::<$ty>(), what)?;
            Ok(<$ty>::from_le_bytes(bytes.try_into().expect("length checked")))
        }
    };
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn at(buf: &'a [u8], pos: usize) -> Self {
        ByteReader { buf, pos }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: expected {n} bytes, {} available (file length {})",
                    self.buf.len().saturating_sub(self.pos),
                    self.buf.len()
                ),
            )),
        }
    }

    read_le!(u16, u16);
    read_le!(u32, u32);
    read_le!(u64, u64);
    read_le!(f32, f32);

    pub(crate) fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.offset();
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(start, format!("{what} is not valid UTF-8")))
    }
}
