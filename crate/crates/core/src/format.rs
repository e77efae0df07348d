//! Little-endian binary encoding shared by every on-disk format.
//!
//! All files start with a four-byte magic tag followed by a `u32` version.
//! The reader tracks its byte offset so truncation and corruption errors can
//! point at the exact failing position.

use crate::error::FormatError;
use crate::numerics::Matrix;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::new();
        w.bytes(magic);
        w.u32(version);
        w
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    /// `u32` rows, `u32` cols, then row-major data.
    pub fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        self.f64s(m.data());
    }

    /// `u64` length prefix followed by the raw bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Checks magic and version, returning the reader positioned after them.
    pub fn with_header(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, FormatError> {
        let mut r = Self::new(buf);
        let found = r.take(4)?;
        if found != magic {
            return Err(FormatError::new(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let v = r.u32()?;
        if v != version {
            return Err(FormatError::new(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(r)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn err(&self, message: impl Into<String>) -> FormatError {
        FormatError::new(self.pos as u64, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::new(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, FormatError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a `u64` count and checks it fits in memory terms before use.
    pub fn len_u64(&mut self, per_item_bytes: usize) -> Result<usize, FormatError> {
        let at = self.pos;
        let n = self.u64()?;
        self.check_len(at, n, per_item_bytes)
    }

    pub fn len_u32(&mut self, per_item_bytes: usize) -> Result<usize, FormatError> {
        let at = self.pos;
        let n = self.u32()? as u64;
        self.check_len(at, n, per_item_bytes)
    }

    fn check_len(&self, at: usize, n: u64, per_item_bytes: usize) -> Result<usize, FormatError> {
        let remaining = (self.buf.len() - self.pos) as u64;
        let need = n.checked_mul(per_item_bytes.max(1) as u64);
        match need {
            Some(need) if need <= remaining || per_item_bytes == 0 => Ok(n as usize),
            _ => Err(FormatError::new(
                at as u64,
                format!("count {n} exceeds remaining {remaining} bytes"),
            )),
        }
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn matrix(&mut self) -> Result<Matrix, FormatError> {
        let at = self.pos as u64;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| FormatError::new(at, "matrix size overflow"))?;
        let data = self.f64s(n)?;
        Matrix::new(rows, cols, data).map_err(|e| FormatError::new(at, e.to_string()))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.len_u64(1)?;
        self.take(n)
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
