//! RAMERCK1 checkpoint files.
//!
//! ```text
//! magic "RAMERCK1", version u16 (1 = pretrained encoders, 2 = stage-3 model)
//! u8 modality count (3), 3 x u32 input dims, u32 hidden, u32 ffn, u32 classes
//! u32 epoch, f64 val WA, u64 seed, u16-prefixed config hash
//! per modality: the 16 tensors in TENSOR_NAMES order as f64
//! [version 2: stage-3 section, see pipeline::model]
//! u32 CRC32
//! ```

use std::fs;
use std::path::Path;

use crate::bytes::{open_checked, sha256_hex, ByteReader, ByteWriter};
use crate::dataset::{Modality, ModalityDims};
use crate::error::{RamerError, Result};

use super::{EncoderParams, EncoderShape};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAMERCK1";
pub(crate) const PRETRAIN_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// 1-based epoch the weights come from.
    pub epoch: u32,
    pub val_wa: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoders: [EncoderParams; 3],
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        &self.encoders[m.index()]
    }

    pub fn dims(&self) -> ModalityDims {
        ModalityDims::new(
            self.encoders[0].shape.input,
            self.encoders[1].shape.input,
            self.encoders[2].shape.input,
        )
    }

    pub fn hidden(&self) -> usize {
        self.encoders[0].shape.hidden
    }

    pub fn ensure_dims(&self, dims: &ModalityDims) -> Result<()> {
        for m in Modality::ALL {
            let (have, want) = (self.encoder(m).shape.input, dims.get(m));
            if have != want {
                return Err(RamerError::DimensionMismatch {
                    expected: want,
                    got: have,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(
            self.encoders
                .iter()
                .map(|e| e.num_params() * 8)
                .sum::<usize>()
                + 128,
        );
        write_prelude(&mut w, PRETRAIN_VERSION, &self.encoders, &self.meta);
        w.finish()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = open_checked(path, bytes, CHECKPOINT_MAGIC)?;
        let (encoders, meta) = read_prelude(&mut r, PRETRAIN_VERSION)?;
        r.finish()?;
        Ok(Self { encoders, meta })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(path, &fs::read(path)?)
}

pub(crate) fn write_encoder(w: &mut ByteWriter, enc: &EncoderParams) {
    for t in enc.tensors() {
        w.f64s(t);
    }
}

pub(crate) fn read_encoder(r: &mut ByteReader<'_>, shape: EncoderShape) -> Result<EncoderParams> {
    let mut enc = EncoderParams::zeros(shape);
    for t in enc.tensors_mut() {
        let values = r.f64s(t.len())?;
        t.copy_from_slice(&values);
    }
    Ok(enc)
}

/// Everything up to and including the encoder tensors.
pub(crate) fn write_prelude(
    w: &mut ByteWriter,
    version: u16,
    encoders: &[EncoderParams; 3],
    meta: &CheckpointMeta,
) {
    let shape = encoders[0].shape;
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(version);
    w.u8(3);
    for e in encoders {
        w.u32(e.shape.input as u32);
    }
    w.u32(shape.hidden as u32);
    w.u32(shape.ffn as u32);
    w.u32(shape.classes as u32);
    w.u32(meta.epoch);
    w.f64(meta.val_wa);
    w.u64(meta.seed);
    w.str16(&meta.config_hash);
    for e in encoders {
        write_encoder(w, e);
    }
}

/// Reads the prelude after the magic, rejecting other versions.
pub(crate) fn read_prelude(
    r: &mut ByteReader<'_>,
    version: u16,
) -> Result<([EncoderParams; 3], CheckpointMeta)> {
    let found = r.u16()?;
    if found != version {
        return Err(RamerError::VersionMismatch {
            path: r.path().to_path_buf(),
            expected: version,
            found,
        });
    }
    let n = r.u8()?;
    if n != 3 {
        return Err(r.err(format!("expected 3 modalities, found {n}")));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let hidden = r.u32()? as usize;
    let ffn = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if dims.contains(&0) || hidden == 0 || ffn == 0 || classes == 0 {
        return Err(r.err("zero dimension in checkpoint header"));
    }
    let needed: usize = dims
        .iter()
        .map(|&input| {
            let shape = EncoderShape {
                input,
                hidden,
                ffn,
                classes,
            };
            shape
                .tensor_shapes()
                .iter()
                .map(|(a, b)| a * b)
                .sum::<usize>()
                * 8
        })
        .sum();
    let meta = CheckpointMeta {
        epoch: r.u32()?,
        val_wa: r.f64()?,
        seed: r.u64()?,
        config_hash: r.str16()?,
    };
    if needed > r.remaining() {
        return Err(r.err(format!(
            "header declares {needed} tensor bytes but the file is too short"
        )));
    }
    let mut read = |input: usize| {
        read_encoder(
            r,
            EncoderShape {
                input,
                hidden,
                ffn,
                classes,
            },
        )
    };
    let encoders = [read(dims[0])?, read(dims[1])?, read(dims[2])?];
    Ok((encoders, meta))
}
