//! Little-endian record helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub(crate) fn write_str16<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u16::<LittleEndian>(s.len() as u16)?;
    w.write_all(s.as_bytes())
}

/// `rows u32, cols u32`, then the entries as row-major f64.
pub(crate) fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> io::Result<()> {
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &x in m.as_slice() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Reader that remembers how many bytes it has handed out, for error offsets.
pub(crate) struct Tracked<R> {
    inner: R,
    pub pos: u64,
}

impl<R: Read> Read for Tracked<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

impl<R: Read> Tracked<R> {
    pub fn new(inner: R) -> Self {
        Tracked { inner, pos: 0 }
    }

    pub fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    pub fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.pos;
        self.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Format {
                offset: start,
                msg: format!("truncated record while reading {what}"),
            },
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut magic = [0u8; 4];
        self.exact(&mut magic, "magic")?;
        if &magic != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {magic:?}, expected {:?}",
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.exact(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| self.fail(format!("{what} is not valid UTF-8")))
    }

    pub fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let start = self.pos;
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let mut raw = vec![0u8; rows * cols * 8];
        self.exact(&mut raw, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Format {
            offset: start,
            msg: format!("{what}: {e}"),
        })
    }

    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if self.read(&mut probe)? != 0 {
            return Err(self.fail("trailing bytes after last record"));
        }
        Ok(())
    }
}
