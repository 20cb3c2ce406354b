//! RFV1: the feature / vector-store file format.
//!
//! ```text
//! magic   "RAMERFV1"
//! version u16
//! modality u8          0 = audio, 1 = video, 2 = text
//! dim     u32
//! count   u64
//! count x { id_len u16, id utf-8, dim x f32 }
//! crc32   u32          over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::bytes::{open_checked, ByteWriter};
use crate::dataset::Modality;
use crate::error::{RamerError, Result};

pub const RFV_MAGIC: &[u8; 8] = b"RAMERFV1";
pub const RFV_VERSION: u16 = 1;

/// Decoded contents of one RFV1 file, rows in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct RfvTable {
    pub modality: Modality,
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `ids.len() x dim`.
    pub data: Vec<f32>,
}

impl RfvTable {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_rfv<'a>(
    modality: Modality,
    dim: usize,
    count: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a [f32])>,
) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(27 + count * (dim * 4 + 12) + 4);
    w.bytes(RFV_MAGIC);
    w.u16(RFV_VERSION);
    w.u8(modality.index() as u8);
    w.u32(dim as u32);
    w.u64(count as u64);
    let mut written = 0;
    for (id, values) in rows {
        assert_eq!(values.len(), dim, "row {id:?} has wrong width");
        w.str16(id);
        for v in values {
            w.f32(*v);
        }
        written += 1;
    }
    assert_eq!(written, count, "row count does not match header");
    w.finish()
}

pub fn write_rfv<'a>(
    path: &Path,
    modality: Modality,
    dim: usize,
    count: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a [f32])>,
) -> Result<()> {
    fs::write(path, encode_rfv(modality, dim, count, rows))?;
    Ok(())
}

pub fn read_rfv(path: &Path) -> Result<RfvTable> {
    let bytes = fs::read(path)?;
    decode_rfv(path, &bytes)
}

pub fn decode_rfv(path: &Path, bytes: &[u8]) -> Result<RfvTable> {
    let mut r = open_checked(path, bytes, RFV_MAGIC)?;
    let version = r.u16()?;
    if version != RFV_VERSION {
        return Err(RamerError::VersionMismatch {
            path: path.to_path_buf(),
            expected: RFV_VERSION,
            found: version,
        });
    }
    let code = r.u8()?;
    let modality = Modality::from_index(code as usize)
        .ok_or_else(|| r.err(format!("bad modality code {code}")))?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(r.err("zero dimension"));
    }
    let count = r.u64()? as usize;
    let remaining = bytes.len().saturating_sub(r.offset() + 4);
    if count.saturating_mul(dim * 4 + 2) > remaining {
        return Err(r.err(format!(
            "header declares {count} rows but the file is too short"
        )));
    }
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let id = r.str16()?;
        if id.is_empty() {
            return Err(r.err("empty id"));
        }
        r.f32s_into(dim, &mut data)?;
        ids.push(id);
    }
    r.finish()?;
    Ok(RfvTable {
        modality,
        dim,
        ids,
        data,
    })
}
