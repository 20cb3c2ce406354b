//! Joint classifier training and inference under a missing condition.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fill::{SlotContext, SlotFiller};
use super::{CompletionConfig, DbSource, MissingCondition, Stage3Model};
use crate::bytes::derive_seed;
use crate::dataset::{Corpus, EmotionLabel, Modality, Sample, Split, NUM_CLASSES};
use crate::encoder::{
    batch_matrix, dropout_mask, labels_of, Checkpoint, EncoderParams, Sgd, TrainConfig, TrunkCache,
};
use crate::error::{RamerError, Result};
use crate::eval::accuracy_pct;
use crate::numerics::{argmax, gemm, softmax, with_matmul_precision, Matrix, Vector};
use crate::vecstore::{AlignedStore, ExclusionSet, SimilarityMetric};

/// Linear classifier over the concatenated three-slot feature.
#[derive(Debug, Clone, PartialEq)]
pub struct JointClassifier {
    /// `3 * hidden x classes`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl JointClassifier {
    pub fn init(hidden: usize, rng: &mut dyn RngCore) -> Self {
        let rows = 3 * hidden;
        let bound = 1.0 / (rows as f64).sqrt();
        Self {
            w: Matrix::from_fn(rows, NUM_CLASSES, |_, _| rng.random_range(-bound..bound)),
            b: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(3 * hidden, NUM_CLASSES),
            b: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows() / 3
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.w.as_slice(), &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_mut_slice(), &mut self.b]
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.w.cols());
        gemm(1.0, x, false, &self.w, false, 0.0, &mut out);
        out.add_row_vector(&self.b);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }
}

/// One batch of joint-classifier inputs. Available modalities carry raw
/// inputs that run through their encoders; missing modalities carry fixed
/// slot values.
#[derive(Debug, Clone, Copy)]
pub struct JointInputs<'a> {
    pub x: [Option<&'a Matrix>; 3],
    pub fixed: [Option<&'a Matrix>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    /// Gradients for encoders that received input (head tensors stay zero).
    pub encoders: [Option<EncoderParams>; 3],
    pub joint: JointClassifier,
}

fn concat_slots(slots: &[&Matrix; 3], hidden: usize) -> Matrix {
    let rows = slots[0].rows();
    let mut out = Matrix::zeros(rows, 3 * hidden);
    for r in 0..rows {
        let dst = out.row_mut(r);
        for (s, slot) in slots.iter().enumerate() {
            dst[s * hidden..(s + 1) * hidden].copy_from_slice(slot.row(r));
        }
    }
    out
}

fn slice_slot(m: &Matrix, slot: usize, hidden: usize) -> Matrix {
    Matrix::from_fn(m.rows(), hidden, |r, c| m.get(r, slot * hidden + c))
}

/// Forward, loss and backward for precomputed encoder caches.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    encoders: &[EncoderParams; 3],
    joint: &JointClassifier,
    xs: &[Option<&Matrix>; 3],
    caches: &[Option<TrunkCache>; 3],
    fixed: &[Option<&Matrix>; 3],
    targets: &[usize],
    mask: Option<&Matrix>,
    encoder_grads: bool,
) -> Result<(f64, JointGrads)> {
    let hidden = joint.hidden();
    let mut slots: Vec<&Matrix> = Vec::with_capacity(3);
    for m in Modality::ALL {
        let i = m.index();
        let slot = match (&caches[i], fixed[i]) {
            (Some(c), None) => &c.h,
            (None, Some(f)) => f,
            _ => {
                return Err(RamerError::InvalidConfig(format!(
                    "{} slot must be exactly one of input or fixed",
                    m.name()
                )))
            }
        };
        if slot.cols() != hidden || slot.rows() != targets.len() {
            return Err(RamerError::DimensionMismatch {
                expected: hidden,
                got: slot.cols(),
            });
        }
        slots.push(slot);
    }
    let mut x = concat_slots(&[slots[0], slots[1], slots[2]], hidden);
    if let Some(mask) = mask {
        for (v, k) in x.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= k;
        }
    }
    let logits = joint.logits(&x);
    let (loss, dlogits) = crate::encoder::softmax_xent_grad(&logits, targets);
    let mut gj = JointClassifier::zeros(hidden);
    gemm(1.0, &x, true, &dlogits, false, 0.0, &mut gj.w);
    gj.b = dlogits.column_sums();
    let mut grads = JointGrads {
        encoders: [None, None, None],
        joint: gj,
    };
    if !encoder_grads || caches.iter().all(Option::is_none) {
        return Ok((loss, grads));
    }
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    gemm(1.0, &dlogits, false, &joint.w, true, 0.0, &mut dx);
    if let Some(mask) = mask {
        for (d, k) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *d *= k;
        }
    }
    for m in Modality::ALL {
        let i = m.index();
        if let (Some(cache), Some(xm)) = (&caches[i], xs[i]) {
            let enc = &encoders[i];
            let mut g = EncoderParams::zeros(enc.shape);
            enc.backward_trunk(xm, cache, &slice_slot(&dx, i, hidden), &mut g);
            grads.encoders[i] = Some(g);
        }
    }
    Ok((loss, grads))
}

/// Mean cross-entropy of the joint classifier and gradients for the joint
/// weights and every encoder that received input. Fixed slots are
/// constants. `mask` scales the concatenated feature (inverted dropout).
pub fn joint_loss_and_grad(
    encoders: &[EncoderParams; 3],
    joint: &JointClassifier,
    inputs: &JointInputs<'_>,
    targets: &[usize],
    mask: Option<&Matrix>,
) -> Result<(f64, JointGrads)> {
    let caches = forward_caches(encoders, &inputs.x)?;
    joint_step(
        encoders,
        joint,
        &inputs.x,
        &caches,
        &inputs.fixed,
        targets,
        mask,
        true,
    )
}

fn forward_caches(
    encoders: &[EncoderParams; 3],
    xs: &[Option<&Matrix>; 3],
) -> Result<[Option<TrunkCache>; 3]> {
    let mut caches = [None, None, None];
    for (i, x) in xs.iter().enumerate() {
        if let Some(x) = x {
            if x.cols() != encoders[i].shape.input {
                return Err(RamerError::DimensionMismatch {
                    expected: encoders[i].shape.input,
                    got: x.cols(),
                });
            }
            caches[i] = Some(encoders[i].forward_trunk(x));
        }
    }
    Ok(caches)
}

/// Retrieval bookkeeping over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetrievalStats {
    pub queries: usize,
    pub degenerate_fusions: usize,
}

/// Independent check that no retrieved id belongs to the barred set or is
/// the query itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakAudit {
    pub checked: usize,
    pub leaks: usize,
    pub examples: Vec<String>,
}

impl LeakAudit {
    fn record(&mut self, query: &str, hit: &str, barred: &HashSet<String>) {
        self.checked += 1;
        if hit == query || barred.contains(hit) {
            self.leaks += 1;
            if self.examples.len() < 10 {
                self.examples.push(format!("{query} -> {hit}"));
            }
        }
    }

    pub fn merge(&mut self, other: &LeakAudit) {
        self.checked += other.checked;
        self.leaks += other.leaks;
        for e in &other.examples {
            if self.examples.len() < 10 {
                self.examples.push(e.clone());
            }
        }
    }
}

/// Fills missing slots for batches of samples.
/// Encoder inputs, trunk caches and fixed slot values for one batch.
type BatchInputs = (
    [Option<Matrix>; 3],
    [Option<TrunkCache>; 3],
    [Option<Matrix>; 3],
);

pub(crate) struct Completer<'a> {
    condition: MissingCondition,
    store: &'a AlignedStore,
    cfg: &'a CompletionConfig,
    metric: Arc<dyn SimilarityMetric>,
    filler: Arc<dyn SlotFiller>,
    exclusions: ExclusionSet,
    barred: HashSet<String>,
    miss_hidden: [Option<Vec<f64>>; 3],
    hidden: usize,
}

impl<'a> Completer<'a> {
    pub(crate) fn new(
        condition: MissingCondition,
        store: &'a AlignedStore,
        cfg: &'a CompletionConfig,
        encoders: &[EncoderParams; 3],
        barred: HashSet<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        let metric = crate::registry::metrics().get(&cfg.metric)?;
        let filler = crate::registry::fillers().get(&cfg.filler)?;
        let hidden = encoders[0].shape.hidden;
        if filler.uses_retrieval() {
            for m in Modality::ALL {
                if store.store(m).dim() != hidden {
                    return Err(RamerError::DimensionMismatch {
                        expected: hidden,
                        got: store.store(m).dim(),
                    });
                }
            }
            if cfg.db_source == DbSource::Raw && !store.has_raw() {
                return Err(RamerError::InvalidConfig(
                    "store has no raw-embedding tables".into(),
                ));
            }
        }
        let mut miss_hidden = [None, None, None];
        if filler.uses_miss_hidden() {
            for m in condition.missing() {
                let enc = &encoders[m.index()];
                let h = enc.hidden(&Matrix::zeros(1, enc.shape.input));
                miss_hidden[m.index()] = Some(h.row(0).to_vec());
            }
        }
        let exclusions = store.exclusions(barred.iter().map(String::as_str));
        Ok(Self {
            condition,
            store,
            cfg,
            metric,
            filler,
            exclusions,
            barred,
            miss_hidden,
            hidden,
        })
    }

    /// Slot matrices for the missing modalities of `batch`.
    fn fill(
        &self,
        batch: &[&Sample],
        xs: &[Option<&Matrix>; 3],
        caches: &[Option<TrunkCache>; 3],
        stats: &mut RetrievalStats,
        audit: &mut LeakAudit,
    ) -> Result<[Option<Matrix>; 3]> {
        let mut pooled: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        if self.filler.uses_retrieval() {
            let extra: Vec<Option<usize>> = batch
                .iter()
                .map(|s| self.store.index().row_of(&s.id))
                .collect();
            for q in self.condition.available() {
                let i = q.index();
                let (searched, queries) = match self.cfg.db_source {
                    DbSource::Hidden => (
                        self.store.store(q),
                        &caches[i].as_ref().expect("available").h,
                    ),
                    DbSource::Raw => (
                        self.store.raw_store(q).expect("checked in new"),
                        xs[i].expect("available"),
                    ),
                };
                let hits = searched.search_batch(
                    queries,
                    self.cfg.k,
                    &self.exclusions,
                    &extra,
                    self.metric.as_ref(),
                )?;
                stats.queries += batch.len();
                for ((s, hs), rows) in batch.iter().zip(&hits).zip(pooled.iter_mut()) {
                    for h in hs {
                        audit.record(&s.id, &h.sample_id, &self.barred);
                        rows.push(h.row);
                    }
                }
            }
        }
        let mut out = [None, None, None];
        for m in self.condition.missing() {
            let store = self.store.store(m);
            let mut slot = Matrix::zeros(batch.len(), self.hidden);
            for (r, rows) in pooled.iter().enumerate() {
                let retrieved: Vec<Vector> =
                    rows.iter().map(|&row| store.record_f64(row)).collect();
                let filled = self.filler.fill(&SlotContext {
                    retrieved: &retrieved,
                    miss_hidden: self.miss_hidden[m.index()].as_deref(),
                    dim: self.hidden,
                    fallback: self.cfg.fallback,
                })?;
                if filled.values.len() != self.hidden {
                    return Err(RamerError::DimensionMismatch {
                        expected: self.hidden,
                        got: filled.values.len(),
                    });
                }
                stats.degenerate_fusions += usize::from(filled.degenerate);
                slot.row_mut(r).copy_from_slice(&filled.values);
            }
            out[m.index()] = Some(slot);
        }
        Ok(out)
    }

    /// Inputs, caches and filled slots for one batch (inference mode).
    fn prepare(
        &self,
        encoders: &[EncoderParams; 3],
        batch: &[&Sample],
        stats: &mut RetrievalStats,
        audit: &mut LeakAudit,
    ) -> Result<BatchInputs> {
        let mut xs: [Option<Matrix>; 3] = [None, None, None];
        for m in self.condition.available() {
            xs[m.index()] = Some(batch_matrix(batch, m, encoders[m.index()].shape.input)?);
        }
        let xr = [xs[0].as_ref(), xs[1].as_ref(), xs[2].as_ref()];
        let caches = forward_caches(encoders, &xr)?;
        let fixed = self.fill(batch, &xr, &caches, stats, audit)?;
        Ok((xs, caches, fixed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: EmotionLabel,
    pub posterior: Vector,
}

const PREDICT_CHUNK: usize = 256;

fn predict_with(
    completer: &Completer<'_>,
    encoders: &[EncoderParams; 3],
    joint: &JointClassifier,
    samples: &[&Sample],
    stats: &mut RetrievalStats,
    audit: &mut LeakAudit,
) -> Result<Vec<Prediction>> {
    let hidden = joint.hidden();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let (_, caches, fixed) = completer.prepare(encoders, chunk, stats, audit)?;
        let slots: Vec<&Matrix> = (0..3)
            .map(|i| {
                caches[i]
                    .as_ref()
                    .map(|c| &c.h)
                    .or(fixed[i].as_ref())
                    .expect("slot filled")
            })
            .collect();
        let logits = joint.logits(&concat_slots(&[slots[0], slots[1], slots[2]], hidden));
        for r in 0..logits.rows() {
            let posterior = softmax(logits.row(r));
            let label = EmotionLabel::from_code(argmax(&posterior)).expect("class index");
            out.push(Prediction { label, posterior });
        }
    }
    Ok(out)
}

/// Ids barred from retrieval: every validation and test sample.
pub(crate) fn held_out_ids(corpus: &Corpus) -> HashSet<String> {
    corpus
        .samples()
        .iter()
        .filter(|s| matches!(s.split, Some(Split::Val | Split::Test)))
        .map(|s| s.id.clone())
        .collect()
}

/// Predictions for `samples`. Retrieval excludes each query's own id and
/// every id in `barred`.
pub fn predict_batch(
    model: &Stage3Model,
    samples: &[&Sample],
    store: &AlignedStore,
    barred: HashSet<String>,
    stats: &mut RetrievalStats,
    audit: &mut LeakAudit,
) -> Result<Vec<Prediction>> {
    let completer = Completer::new(
        model.condition,
        store,
        &model.completion,
        &model.encoders,
        barred,
    )?;
    predict_with(
        &completer,
        &model.encoders,
        &model.joint,
        samples,
        stats,
        audit,
    )
}

/// Single-sample prediction.
pub fn predict(
    sample: &Sample,
    model: &Stage3Model,
    store: &AlignedStore,
    barred: HashSet<String>,
) -> Result<Prediction> {
    let mut stats = RetrievalStats::default();
    let mut audit = LeakAudit::default();
    let mut preds = predict_batch(model, &[sample], store, barred, &mut stats, &mut audit)?;
    Ok(preds.pop().expect("one prediction"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Epoch {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_wa: f64,
}

#[derive(Debug, Clone)]
pub struct Stage3Outcome {
    pub model: Stage3Model,
    pub history: Vec<Stage3Epoch>,
    pub stats: RetrievalStats,
    pub audit: LeakAudit,
}

fn labeled_in(corpus: &Corpus, split: Split) -> Vec<&Sample> {
    corpus
        .samples()
        .iter()
        .filter(|s| s.split == Some(split) && s.label.is_some())
        .collect()
}

/// Trains the joint classifier (and, unless frozen, the available
/// encoders) on the train split under `condition`. Retrieved substitutes
/// are constants. Returns the epoch with the best validation WA.
pub fn train_missing(
    corpus: &Corpus,
    condition: MissingCondition,
    store: &AlignedStore,
    checkpoint: &Checkpoint,
    cfg: &CompletionConfig,
    train_cfg: &TrainConfig,
) -> Result<Stage3Outcome> {
    train_cfg.validate()?;
    with_matmul_precision(train_cfg.matmul, || {
        train_stage3(corpus, condition, store, checkpoint, cfg, train_cfg)
    })
}

fn train_stage3(
    corpus: &Corpus,
    condition: MissingCondition,
    store: &AlignedStore,
    checkpoint: &Checkpoint,
    cfg: &CompletionConfig,
    train_cfg: &TrainConfig,
) -> Result<Stage3Outcome> {
    checkpoint.ensure_dims(&corpus.dims())?;
    let train = labeled_in(corpus, Split::Train);
    if train.is_empty() {
        return Err(RamerError::EmptyTrainSplit);
    }
    let val = labeled_in(corpus, Split::Val);
    if val.is_empty() {
        return Err(RamerError::Empty("validation split"));
    }
    let barred = held_out_ids(corpus);
    let mut encoders = checkpoint.encoders.clone();
    let hidden = checkpoint.hidden();
    let completer = Completer::new(condition, store, cfg, &checkpoint.encoders, barred)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, &[3, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, &[3, 2]));
    let mut joint = JointClassifier::init(hidden, &mut init_rng);
    let mut joint_opt = Sgd::new(train_cfg.learning_rate, train_cfg.momentum, joint.tensors());
    let mut enc_opts: Vec<Sgd> = encoders
        .iter()
        .map(|e| Sgd::new(train_cfg.learning_rate, train_cfg.momentum, e.tensors()))
        .collect();
    let tune = !cfg.freeze_encoders;
    let val_truth = labels_of(&val);

    let mut stats = RetrievalStats::default();
    let mut audit = LeakAudit::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<([EncoderParams; 3], JointClassifier, u32, f64)> = None;
    for epoch in 1..=train_cfg.epochs as u32 {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let targets = labels_of(&batch);
            let (xs, caches, fixed) =
                completer.prepare(&encoders, &batch, &mut stats, &mut audit)?;
            let mask = dropout_mask(batch.len(), 3 * hidden, train_cfg.dropout_rate, &mut rng);
            let xr = [xs[0].as_ref(), xs[1].as_ref(), xs[2].as_ref()];
            let fr = [fixed[0].as_ref(), fixed[1].as_ref(), fixed[2].as_ref()];
            let (loss, grads) = joint_step(
                &encoders,
                &joint,
                &xr,
                &caches,
                &fr,
                &targets,
                Some(&mask),
                tune,
            )?;
            joint_opt.step(joint.tensors_mut(), grads.joint.tensors());
            for (i, g) in grads.encoders.iter().enumerate() {
                if let Some(g) = g {
                    enc_opts[i].step(encoders[i].tensors_mut(), g.tensors());
                }
            }
            loss_sum += loss;
            batches += 1;
        }
        if !joint.is_finite() || encoders.iter().any(|e| !e.is_finite()) {
            return Err(RamerError::NonFinite("stage-3 parameters after update"));
        }
        let preds = predict_with(&completer, &encoders, &joint, &val, &mut stats, &mut audit)?;
        let pred_codes: Vec<usize> = preds.iter().map(|p| p.label.code()).collect();
        let val_wa = accuracy_pct(&pred_codes, &val_truth);
        log::debug!(
            "stage-3 {condition} epoch {epoch}: loss {:.4} val WA {val_wa:.2}",
            loss_sum / batches as f64
        );
        history.push(Stage3Epoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_wa,
        });
        if best.as_ref().is_none_or(|b| val_wa > b.3) {
            best = Some((encoders.clone(), joint.clone(), epoch, val_wa));
        }
    }
    let (encoders, joint, epoch, val_wa) = best.expect("at least one epoch");
    Ok(Stage3Outcome {
        model: Stage3Model {
            condition,
            completion: cfg.clone(),
            tier: store.tier,
            checkpoint_hash: checkpoint.hash(),
            store_hash: store.hash(),
            encoders,
            joint,
            epoch,
            val_wa,
            seed: train_cfg.seed,
            config_hash: train_cfg.hash(),
        },
        history,
        stats,
        audit,
    })
}
