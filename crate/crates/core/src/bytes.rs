//! Little-endian binary helpers shared by the RFV1 and RAMERCK1 formats.
//! Both formats end in a CRC32 over every preceding byte.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{RamerError, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

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

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    /// u16 length prefix followed by UTF-8 bytes.
    pub fn str16(&mut self, s: &str) {
        assert!(
            s.len() <= u16::MAX as usize,
            "string too long for u16 prefix"
        );
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }

    /// Appends the trailing CRC32 and returns the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validates the trailing CRC and returns a reader over the payload.
    pub fn checked(path: &Path, data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(RamerError::Format {
                path: path.to_path_buf(),
                offset: data.len() as u64,
                msg: "file truncated before CRC".into(),
            });
        }
        let (payload, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        let reader = Self {
            path: path.to_path_buf(),
            data: payload,
            pos: 0,
        };
        if stored != computed {
            return Err(RamerError::CrcMismatch {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        Ok(reader)
    }

    pub fn err(&self, msg: impl Into<String>) -> RamerError {
        RamerError::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of data reading {n} bytes")));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            self.pos -= 8;
            return Err(self.err("non-finite value"));
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn f32s_into(&mut self, n: usize, out: &mut Vec<f32>) -> Result<()> {
        let raw = self.take(n * 4)?;
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(self.err("non-finite value"));
            }
            out.push(v);
        }
        Ok(())
    }

    pub fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(RamerError::BadMagic {
                path: self.path.clone(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!(
                "{} trailing bytes before CRC",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Checks the magic before the CRC so that foreign files get a clear error.
pub(crate) fn open_checked<'a>(
    path: &Path,
    data: &'a [u8],
    magic: &[u8],
) -> Result<ByteReader<'a>> {
    if data.len() < magic.len() || &data[..magic.len()] != magic {
        return Err(RamerError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut r = ByteReader::checked(path, data)?;
    r.expect_magic(magic)?;
    Ok(r)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SplitMix64 mixing of a master seed with a path of sub-indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = master;
    for &p in path {
        state = splitmix(state ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
