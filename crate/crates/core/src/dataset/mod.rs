//! Corpus model: samples, labels, modalities, splits and retrieval scale tiers.

mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RamerError, Result};

pub use io::{load_features, load_manifest, write_features, write_manifest, ManifestRecord};
pub use synthetic::{generate_synthetic, SyntheticConfig, REFERENCE_CLASS_COUNTS};

pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Happy,
    Angry,
    Sad,
    Neutral,
    Worried,
    Surprise,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Happy,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
        EmotionLabel::Worried,
        EmotionLabel::Surprise,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Angry => "Angry",
            EmotionLabel::Sad => "Sad",
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Worried => "Worried",
            EmotionLabel::Surprise => "Surprise",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    /// Case-insensitive match on the category name.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown emotion label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Condition letter: `a`, `v`, or `l` (lexical).
    pub fn letter(self) -> char {
        match self {
            Modality::Audio => 'a',
            Modality::Video => 'v',
            Modality::Text => 'l',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-modality embedding widths, indexed by [`Modality::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityDims {
    pub audio: usize,
    pub video: usize,
    pub text: usize,
}

impl ModalityDims {
    pub const fn new(audio: usize, video: usize, text: usize) -> Self {
        Self { audio, video, text }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio,
            Modality::Video => self.video,
            Modality::Text => self.text,
        }
    }

    pub fn set(&mut self, m: Modality, dim: usize) {
        match m {
            Modality::Audio => self.audio = dim,
            Modality::Video => self.video = dim,
            Modality::Text => self.text = dim,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.audio, self.video, self.text]
    }
}

impl Default for ModalityDims {
    fn default() -> Self {
        Self::new(1024, 768, 5120)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One utterance. Embeddings are kept at storage precision (`f32`) and
/// shared, so split reassignment never copies feature data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Option<EmotionLabel>,
    pub split: Option<Split>,
    embeddings: [Option<Arc<[f32]>>; 3],
}

impl Sample {
    pub fn new(id: impl Into<String>, label: Option<EmotionLabel>) -> Self {
        Self {
            id: id.into(),
            label,
            split: None,
            embeddings: [None, None, None],
        }
    }

    pub fn with_embedding(mut self, m: Modality, values: Vec<f32>) -> Self {
        self.embeddings[m.index()] = Some(values.into());
        self
    }

    pub fn embedding(&self, m: Modality) -> Option<&[f32]> {
        self.embeddings[m.index()].as_deref()
    }

    pub(crate) fn set_embedding(&mut self, m: Modality, values: Arc<[f32]>) {
        self.embeddings[m.index()] = Some(values);
    }

    /// Widened copy of one embedding, or an error naming the sample.
    pub fn embedding_f64(&self, m: Modality) -> Result<Vec<f64>> {
        self.embedding(m)
            .map(|e| e.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| RamerError::MissingEmbedding {
                id: self.id.clone(),
                modality: m.name(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
    dims: ModalityDims,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(dims: ModalityDims) -> Self {
        Self {
            samples: Vec::new(),
            dims,
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.id.is_empty() {
            return Err(RamerError::InvalidConfig("empty sample id".into()));
        }
        if self.index.contains_key(&sample.id) {
            return Err(RamerError::DuplicateId(sample.id));
        }
        for m in Modality::ALL {
            if let Some(e) = sample.embedding(m) {
                if e.len() != self.dims.get(m) {
                    return Err(RamerError::DimensionMismatch {
                        expected: self.dims.get(m),
                        got: e.len(),
                    });
                }
            }
        }
        self.index.insert(sample.id.clone(), self.samples.len());
        self.samples.push(sample);
        Ok(())
    }

    pub fn dims(&self) -> ModalityDims {
        self.dims
    }

    pub(crate) fn set_dim(&mut self, m: Modality, dim: usize) {
        self.dims.set(m, dim);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label.is_none())
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.split == Some(split))
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for s in self.labeled() {
            h[s.label.expect("labeled").code()] += 1;
        }
        h
    }

    /// Copy of the corpus with labeled samples reassigned according to
    /// `assign`; unlabeled samples always get [`Split::Unlabeled`].
    pub fn with_splits(&self, assign: &HashMap<&str, Split>) -> Corpus {
        let mut out = self.clone();
        for s in out.samples.iter_mut() {
            s.split = if s.label.is_none() {
                Some(Split::Unlabeled)
            } else {
                assign.get(s.id.as_str()).copied()
            };
        }
        out
    }
}

fn labeled_by_class(corpus: &Corpus) -> BTreeMap<EmotionLabel, Vec<&str>> {
    let mut by_class: BTreeMap<EmotionLabel, Vec<&str>> = BTreeMap::new();
    for s in corpus.labeled() {
        by_class
            .entry(s.label.expect("labeled"))
            .or_default()
            .push(s.id.as_str());
    }
    by_class
}

/// Per-class (train, val, test) counts for an 8:1:1 split. Val and test each
/// get at least one sample, which is why classes need three.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let tenth = ((n as f64) * 0.1).round() as usize;
    let held = tenth.max(1);
    (n - 2 * held, held, held)
}

/// Stratified 8:1:1 train/val/test assignment of the labeled samples.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    let by_class = labeled_by_class(corpus);
    if by_class.is_empty() {
        return Err(RamerError::Empty("labeled samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = HashMap::new();
    for (label, mut ids) in by_class {
        if ids.len() < 3 {
            return Err(RamerError::Stratify {
                label: label.name().into(),
                count: ids.len(),
            });
        }
        ids.shuffle(&mut rng);
        let (train, val, _) = split_counts(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            assign.insert(id, split);
        }
    }
    Ok(corpus.with_splits(&assign))
}

/// Stratified partition of the labeled ids into `k` folds (round-robin per
/// shuffled class, so fold sizes differ by at most one per class).
pub fn stratified_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(RamerError::InvalidConfig(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let by_class = labeled_by_class(corpus);
    if by_class.is_empty() {
        return Err(RamerError::Empty("labeled samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for (label, mut ids) in by_class {
        // Each held-out fold is halved into val/test, so it needs two per class.
        if ids.len() < 2 * k {
            return Err(RamerError::Stratify {
                label: label.name().into(),
                count: ids.len(),
            });
        }
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].push(id.to_string());
        }
    }
    Ok(folds)
}

/// Assigns fold `held_out` to val/test (per class, the first half of the
/// fold's ids to val, the rest to test) and every other fold to train.
pub fn fold_split(corpus: &Corpus, folds: &[Vec<String>], held_out: usize) -> Result<Corpus> {
    if held_out >= folds.len() {
        return Err(RamerError::InvalidConfig(format!(
            "fold {held_out} out of range for {} folds",
            folds.len()
        )));
    }
    let mut assign: HashMap<&str, Split> = HashMap::new();
    for (f, ids) in folds.iter().enumerate() {
        if f == held_out {
            continue;
        }
        for id in ids {
            assign.insert(id.as_str(), Split::Train);
        }
    }
    let mut by_class: BTreeMap<EmotionLabel, Vec<&str>> = BTreeMap::new();
    for id in &folds[held_out] {
        let label = corpus
            .get(id)
            .ok_or_else(|| RamerError::UnknownId(id.clone()))?
            .label
            .ok_or_else(|| RamerError::InvalidConfig(format!("fold member {id:?} is unlabeled")))?;
        by_class.entry(label).or_default().push(id.as_str());
    }
    for ids in by_class.values() {
        let val = ids.len().div_ceil(2);
        for (i, id) in ids.iter().enumerate() {
            assign.insert(id, if i < val { Split::Val } else { Split::Test });
        }
    }
    Ok(corpus.with_splits(&assign))
}

/// Scale tiers of the retrieval database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTier {
    /// All labeled samples.
    Small,
    /// A seeded half of the unlabeled samples.
    Medium,
    /// All unlabeled samples.
    Large,
    /// Labeled and unlabeled samples.
    Turbo,
}

impl ScaleTier {
    pub const ALL: [ScaleTier; 4] = [
        ScaleTier::Small,
        ScaleTier::Medium,
        ScaleTier::Large,
        ScaleTier::Turbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScaleTier::Small => "small",
            ScaleTier::Medium => "medium",
            ScaleTier::Large => "large",
            ScaleTier::Turbo => "turbo",
        }
    }
}

impl fmt::Display for ScaleTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScaleTier {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown tier {s:?}"))
    }
}

pub fn tier_members(corpus: &Corpus, tier: ScaleTier, seed: u64) -> BTreeSet<String> {
    let labeled = || corpus.labeled().map(|s| s.id.clone());
    let unlabeled = || corpus.unlabeled().map(|s| s.id.clone());
    match tier {
        ScaleTier::Small => labeled().collect(),
        ScaleTier::Large => unlabeled().collect(),
        ScaleTier::Turbo => labeled().chain(unlabeled()).collect(),
        ScaleTier::Medium => {
            let mut pool: Vec<String> = unlabeled().collect();
            let half = pool.len() / 2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (chosen, _) = pool.partial_shuffle(&mut rng, half);
            chosen.iter().cloned().collect()
        }
    }
}
