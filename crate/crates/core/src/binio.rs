//! Little-endian reader that remembers its byte offset for error reports.

use std::io::{self, Read};

use crate::error::{Error, Result};

pub(crate) struct ByteReader<R> {
    pub(crate) inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated while reading {what}"),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Fails unless the stream is exhausted.
    pub(crate) fn expect_end(&mut self, what: &str) -> Result<()> {
        let mut probe = [0u8; 1];
        if self.inner.read(&mut probe)? != 0 {
            return Err(Error::format(self.offset, format!("trailing bytes after {what}")));
        }
        Ok(())
    }
}
