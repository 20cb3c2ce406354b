//! Stage-3 model file: a RAMERCK1 checkpoint with version 2 and a trailing
//! section describing the completion setup and the joint classifier.
//!
//! ```text
//! prelude (as version 1, with version = 2)
//! condition str16, k u32, metric str16, db_source u8, filler str16,
//! fallback u8, freeze u8, tier u8, checkpoint hash str16, store hash str16,
//! joint rows u32, joint cols u32, weights f64..., bias f64...
//! crc32
//! ```

use std::fs;
use std::path::Path;

use super::{CompletionConfig, DbSource, FusionFallback, JointClassifier, MissingCondition};
use crate::bytes::{open_checked, sha256_hex, ByteWriter};
use crate::dataset::{ScaleTier, NUM_CLASSES};
use crate::encoder::{
    read_prelude, write_prelude, CheckpointMeta, EncoderParams, CHECKPOINT_MAGIC,
};
use crate::error::Result;
use crate::numerics::Matrix;

pub const MODEL_VERSION: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Model {
    pub condition: MissingCondition,
    pub completion: CompletionConfig,
    pub tier: ScaleTier,
    /// Hash of the stage-1 checkpoint the encoders started from.
    pub checkpoint_hash: String,
    /// Hash of the store used for retrieval; empty when not recorded.
    pub store_hash: String,
    pub encoders: [EncoderParams; 3],
    pub joint: JointClassifier,
    pub epoch: u32,
    pub val_wa: f64,
    pub seed: u64,
    pub config_hash: String,
}

fn tier_code(t: ScaleTier) -> u8 {
    ScaleTier::ALL
        .iter()
        .position(|x| *x == t)
        .expect("known tier") as u8
}

impl Stage3Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            val_wa: self.val_wa,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        let size = self
            .encoders
            .iter()
            .map(|e| e.num_params() * 8)
            .sum::<usize>()
            + self.joint.w.as_slice().len() * 8;
        let mut w = ByteWriter::with_capacity(size + 512);
        write_prelude(&mut w, MODEL_VERSION, &self.encoders, &meta);
        let c = &self.completion;
        w.str16(&self.condition.code());
        w.u32(c.k as u32);
        w.str16(&c.metric);
        w.u8(match c.db_source {
            DbSource::Hidden => 0,
            DbSource::Raw => 1,
        });
        w.str16(&c.filler);
        w.u8(match c.fallback {
            FusionFallback::FirstNormalized => 0,
            FusionFallback::Error => 1,
        });
        w.u8(u8::from(c.freeze_encoders));
        w.u8(tier_code(self.tier));
        w.str16(&self.checkpoint_hash);
        w.str16(&self.store_hash);
        w.u32(self.joint.w.rows() as u32);
        w.u32(self.joint.w.cols() as u32);
        w.f64s(self.joint.w.as_slice());
        w.f64s(&self.joint.b);
        w.finish()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = open_checked(path, bytes, CHECKPOINT_MAGIC)?;
        let (encoders, meta) = read_prelude(&mut r, MODEL_VERSION)?;
        let condition: MissingCondition = r.str16()?.parse().map_err(|e: String| r.err(e))?;
        let k = r.u32()? as usize;
        let metric = r.str16()?;
        let db_source = match r.u8()? {
            0 => DbSource::Hidden,
            1 => DbSource::Raw,
            other => return Err(r.err(format!("bad db source code {other}"))),
        };
        let filler = r.str16()?;
        let fallback = match r.u8()? {
            0 => FusionFallback::FirstNormalized,
            1 => FusionFallback::Error,
            other => return Err(r.err(format!("bad fallback code {other}"))),
        };
        let freeze_encoders = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.err(format!("bad freeze flag {other}"))),
        };
        let code = r.u8()?;
        let tier = *ScaleTier::ALL
            .get(code as usize)
            .ok_or_else(|| r.err(format!("bad tier code {code}")))?;
        let checkpoint_hash = r.str16()?;
        let store_hash = r.str16()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let hidden = encoders[0].shape.hidden;
        if rows != 3 * hidden || cols != NUM_CLASSES {
            return Err(r.err(format!(
                "joint classifier is {rows}x{cols}, expected {}x{NUM_CLASSES}",
                3 * hidden
            )));
        }
        let w = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
        let b = r.f64s(cols)?;
        r.finish()?;
        let completion = CompletionConfig {
            k,
            metric,
            db_source,
            filler,
            fallback,
            freeze_encoders,
        };
        completion.validate()?;
        Ok(Self {
            condition,
            completion,
            tier,
            checkpoint_hash,
            store_hash,
            encoders,
            joint: JointClassifier { w, b },
            epoch: meta.epoch,
            val_wa: meta.val_wa,
            seed: meta.seed,
            config_hash: meta.config_hash,
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn save_model(path: &Path, model: &Stage3Model) -> Result<()> {
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Stage3Model> {
    let bytes = fs::read(path)?;
    Stage3Model::from_bytes(path, &bytes)
}
