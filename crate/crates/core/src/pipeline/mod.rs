//! Missing-modality completion: retrieve substitutes through the available
//! modalities, fuse them, fill the missing slots and classify the
//! concatenated hidden features.

mod fill;
mod model;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Modality, Sample};
use crate::encoder::{Checkpoint, EncoderParams};
use crate::error::{RamerError, Result};
use crate::numerics::{l2_norm, l2_normalize, Matrix, Vector, NORM_EPS};
use crate::vecstore::{AlignedStore, ExclusionSet, SearchHit};

pub use fill::{Filled, FusedRetrieval, KeepMissAverage, SlotContext, SlotFiller, ZeroFill};
pub use model::{load_model, save_model, Stage3Model, MODEL_VERSION};
pub use train::{
    joint_loss_and_grad, predict, predict_batch, train_missing, JointClassifier, JointGrads,
    JointInputs, LeakAudit, Prediction, RetrievalStats, Stage3Epoch, Stage3Outcome,
};

/// Which modalities are present at train and test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MissingCondition {
    available: [bool; 3],
}

impl MissingCondition {
    /// The six evaluation conditions in report order.
    pub const GRID: [MissingCondition; 6] = [
        Self::of(true, false, false),
        Self::of(false, true, false),
        Self::of(false, false, true),
        Self::of(true, true, false),
        Self::of(true, false, true),
        Self::of(false, true, true),
    ];

    pub const FULL: MissingCondition = Self::of(true, true, true);

    const fn of(audio: bool, video: bool, text: bool) -> Self {
        Self {
            available: [audio, video, text],
        }
    }

    pub fn from_available(modalities: &[Modality]) -> Result<Self> {
        let mut available = [false; 3];
        for m in modalities {
            available[m.index()] = true;
        }
        if available == [false; 3] {
            return Err(RamerError::InvalidConfig(
                "a condition needs at least one modality".into(),
            ));
        }
        Ok(Self { available })
    }

    pub fn is_available(&self, m: Modality) -> bool {
        self.available[m.index()]
    }

    pub fn available(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.is_available(*m))
            .collect()
    }

    pub fn missing(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| !self.is_available(*m))
            .collect()
    }

    /// One of the six grid conditions (full availability excluded).
    pub fn is_grid(&self) -> bool {
        *self != Self::FULL
    }

    /// Letter code such as `a`, `vl` or `avl`.
    pub fn code(&self) -> String {
        self.available().iter().map(|m| m.letter()).collect()
    }
}

impl fmt::Display for MissingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for MissingCondition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        let mut mods = Vec::new();
        for c in s.chars() {
            let m = Modality::ALL
                .into_iter()
                .find(|m| m.letter() == c)
                .ok_or_else(|| format!("unknown modality letter {c:?} in condition {s:?}"))?;
            if mods.contains(&m) {
                return Err(format!("repeated modality in condition {s:?}"));
            }
            mods.push(m);
        }
        Self::from_available(&mods).map_err(|e| e.to_string())
    }
}

impl Serialize for MissingCondition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for MissingCondition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Feature space searched during retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbSource {
    /// Normalized encoder hidden features.
    Hidden,
    /// Raw input embeddings; hits still deliver hidden features.
    Raw,
}

impl DbSource {
    pub fn name(self) -> &'static str {
        match self {
            DbSource::Hidden => "hidden",
            DbSource::Raw => "raw",
        }
    }
}

impl FromStr for DbSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hidden" => Ok(DbSource::Hidden),
            "raw" => Ok(DbSource::Raw),
            other => Err(format!(
                "unknown db source {other:?} (expected hidden or raw)"
            )),
        }
    }
}

/// What [`fuse_topk`] does when the summed vector cancels out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionFallback {
    /// Use the normalized first vector and flag the result.
    #[default]
    FirstNormalized,
    /// Report [`RamerError::DegenerateVector`].
    Error,
}

/// How missing slots are completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub k: usize,
    /// Registered similarity metric name.
    pub metric: String,
    pub db_source: DbSource,
    /// Registered slot filler name.
    pub filler: String,
    pub fallback: FusionFallback,
    /// Keep the available-modality encoders fixed during joint training.
    pub freeze_encoders: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            metric: "cosine".into(),
            db_source: DbSource::Hidden,
            filler: "retrieval".into(),
            fallback: FusionFallback::FirstNormalized,
            freeze_encoders: false,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(RamerError::InvalidConfig("k must be at least 1".into()));
        }
        crate::registry::metrics().get(&self.metric)?;
        crate::registry::fillers().get(&self.filler)?;
        Ok(())
    }
}

/// Result of [`fuse_topk`].
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub vector: Vector,
    /// The sum cancelled and the fallback was used.
    pub degenerate: bool,
}

/// Sums the vectors and L2-normalizes the sum.
pub fn fuse_topk<V: AsRef<[f64]>>(vs: &[V], fallback: FusionFallback) -> Result<Fused> {
    let first = vs
        .first()
        .ok_or(RamerError::Empty("retrieved vector list"))?
        .as_ref();
    let mut sum = vec![0.0; first.len()];
    for v in vs {
        let v = v.as_ref();
        if v.len() != sum.len() {
            return Err(RamerError::DimensionMismatch {
                expected: sum.len(),
                got: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let norm = l2_norm(&sum);
    if norm > NORM_EPS {
        return Ok(Fused {
            vector: l2_normalize(&sum)?,
            degenerate: false,
        });
    }
    match fallback {
        FusionFallback::FirstNormalized => Ok(Fused {
            vector: l2_normalize(first)?,
            degenerate: true,
        }),
        FusionFallback::Error => Err(RamerError::DegenerateVector { norm }),
    }
}

/// Concatenates slots in audio, video, text order. Every modality must be
/// covered by exactly one of the two maps.
pub fn complete(
    hidden: &BTreeMap<Modality, Vector>,
    fused: &BTreeMap<Modality, Vector>,
) -> Result<Vector> {
    let mut out = Vec::new();
    let mut width = None;
    for m in Modality::ALL {
        let slot = match (hidden.get(&m), fused.get(&m)) {
            (Some(h), None) => h,
            (None, Some(f)) => f,
            (Some(_), Some(_)) => {
                return Err(RamerError::InvalidConfig(format!(
                    "{} slot given twice",
                    m.name()
                )))
            }
            (None, None) => {
                return Err(RamerError::InvalidConfig(format!(
                    "{} slot not filled",
                    m.name()
                )))
            }
        };
        if *width.get_or_insert(slot.dim()) != slot.dim() {
            return Err(RamerError::DimensionMismatch {
                expected: width.unwrap_or_default(),
                got: slot.dim(),
            });
        }
        out.extend_from_slice(slot);
    }
    Vector::new(out)
}

/// Inference-mode hidden features of the available modalities.
pub fn infer_available_hidden(
    sample: &Sample,
    condition: MissingCondition,
    encoders: &[EncoderParams; 3],
) -> Result<BTreeMap<Modality, Vector>> {
    let mut out = BTreeMap::new();
    for m in condition.available() {
        let x = sample.embedding_f64(m)?;
        let enc = &encoders[m.index()];
        if x.len() != enc.shape.input {
            return Err(RamerError::DimensionMismatch {
                expected: enc.shape.input,
                got: x.len(),
            });
        }
        let h = enc.hidden(&Matrix::from_vec(1, x.len(), x)?);
        out.insert(m, Vector::new(h.row(0).to_vec())?);
    }
    Ok(out)
}

/// Convenience wrapper over [`infer_available_hidden`] for a checkpoint.
pub fn infer_with_checkpoint(
    sample: &Sample,
    condition: MissingCondition,
    checkpoint: &Checkpoint,
) -> Result<BTreeMap<Modality, Vector>> {
    infer_available_hidden(sample, condition, &checkpoint.encoders)
}

/// Retrieved substitute vectors per missing modality.
pub type Substitutes = BTreeMap<Modality, Vec<Vector>>;

/// For each available modality, search its store with the query vector and
/// look the hit ids up in every missing modality. Hits of several available
/// modalities are pooled in audio, video, text order.
///
/// `queries` holds the hidden feature per available modality, or the raw
/// embedding when `cfg.db_source` is [`DbSource::Raw`].
pub fn retrieve_substitutes(
    queries: &BTreeMap<Modality, Vector>,
    condition: MissingCondition,
    store: &AlignedStore,
    cfg: &CompletionConfig,
    exclusions: &ExclusionSet,
) -> Result<(Substitutes, Vec<SearchHit>)> {
    let metric = crate::registry::metrics().get(&cfg.metric)?;
    let mut hits = Vec::new();
    for m in condition.available() {
        let q = queries.get(&m).ok_or_else(|| {
            RamerError::InvalidConfig(format!(
                "no {} query vector for condition {condition}",
                m.name()
            ))
        })?;
        let searched = match cfg.db_source {
            DbSource::Hidden => store.store(m),
            DbSource::Raw => store.raw_store(m).ok_or_else(|| {
                RamerError::InvalidConfig("store has no raw-embedding tables".into())
            })?,
        };
        hits.extend(searched.search_topk(q, cfg.k, exclusions, metric.as_ref())?);
    }
    let ids: Vec<&str> = hits.iter().map(|h| h.sample_id.as_str()).collect();
    let mut out = BTreeMap::new();
    for m in condition.missing() {
        out.insert(m, store.cross_lookup(&ids, m)?);
    }
    Ok((out, hits))
}
