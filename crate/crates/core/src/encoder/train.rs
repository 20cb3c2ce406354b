//! Stage-1 full-modality pretraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dropout_mask, Checkpoint, CheckpointMeta, EncoderParams, EncoderShape};
use crate::bytes::{derive_seed, sha256_hex};
use crate::dataset::{Corpus, Modality, Sample, Split};
use crate::error::{RamerError, Result};
use crate::eval::accuracy_pct;
use crate::numerics::{argmax, with_matmul_precision, MatmulPrecision, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
    /// Width of matrix products inside training loops.
    pub matmul: MatmulPrecision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            dropout_rate: 0.5,
            learning_rate: 1e-3,
            momentum: 0.9,
            hidden: 256,
            seed: 0,
            matmul: MatmulPrecision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(RamerError::InvalidConfig(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// SGD with classical momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new<'a>(lr: f64, momentum: f64, tensors: impl IntoIterator<Item = &'a [f64]>) -> Self {
        Self {
            lr,
            momentum,
            velocity: tensors.into_iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: impl IntoIterator<Item = &'b [f64]>,
    ) {
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_wa: [f64; 3],
    pub mean_val_wa: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Stacks one modality's embeddings for `samples` into a batch matrix.
pub(crate) fn batch_matrix(samples: &[&Sample], m: Modality, dim: usize) -> Result<Matrix> {
    let mut x = Matrix::zeros(samples.len(), dim);
    for (r, s) in samples.iter().enumerate() {
        let e = s.embedding(m).ok_or_else(|| RamerError::MissingEmbedding {
            id: s.id.clone(),
            modality: m.name(),
        })?;
        if e.len() != dim {
            return Err(RamerError::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
        for (o, v) in x.row_mut(r).iter_mut().zip(e) {
            *o = f64::from(*v);
        }
    }
    Ok(x)
}

pub(crate) fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples
        .iter()
        .map(|s| s.label.expect("labeled sample").code())
        .collect()
}

/// Inference-mode predictions of one encoder's own classifier.
pub(crate) fn predict_unimodal(
    enc: &EncoderParams,
    samples: &[&Sample],
    m: Modality,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let x = batch_matrix(chunk, m, enc.shape.input)?;
        let logits = enc.head(&enc.hidden(&x));
        preds.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
    }
    Ok(preds)
}

fn split_samples(corpus: &Corpus, split: Split) -> Vec<&Sample> {
    corpus
        .samples()
        .iter()
        .filter(|s| s.split == Some(split) && s.label.is_some())
        .collect()
}

/// Trains the three encoders on the train split with the summed per-modality
/// cross-entropy and returns the epoch with the best mean validation WA.
pub fn pretrain_full_modality(corpus: &Corpus, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    with_matmul_precision(cfg.matmul, || pretrain(corpus, cfg))
}

fn pretrain(corpus: &Corpus, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let train = split_samples(corpus, Split::Train);
    if train.is_empty() {
        return Err(RamerError::EmptyTrainSplit);
    }
    let val = split_samples(corpus, Split::Val);
    if val.is_empty() {
        return Err(RamerError::Empty("validation split"));
    }
    let dims = corpus.dims();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut encoders = Modality::ALL
        .map(|m| EncoderParams::init(EncoderShape::new(dims.get(m), cfg.hidden), &mut init_rng));
    let mut optimizers = encoders
        .each_ref()
        .map(|e| Sgd::new(cfg.learning_rate, cfg.momentum, e.tensors()));
    let val_truth = labels_of(&val);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<([EncoderParams; 3], u32, f64)> = None;
    for epoch in 1..=cfg.epochs as u32 {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let targets = labels_of(&batch);
            for m in Modality::ALL {
                let enc = &mut encoders[m.index()];
                let x = batch_matrix(&batch, m, enc.shape.input)?;
                let mask = dropout_mask(batch.len(), enc.shape.hidden, cfg.dropout_rate, &mut rng);
                let (loss, grads) = enc.loss_and_grad(&x, &targets, Some(&mask));
                optimizers[m.index()].step(enc.tensors_mut(), grads.tensors());
                loss_sum += loss;
            }
            batches += 1;
        }
        if encoders.iter().any(|e| !e.is_finite()) {
            return Err(RamerError::NonFinite("encoder parameters after update"));
        }
        let mut val_wa = [0.0; 3];
        for m in Modality::ALL {
            let preds = predict_unimodal(&encoders[m.index()], &val, m)?;
            val_wa[m.index()] = accuracy_pct(&preds, &val_truth);
        }
        let mean = val_wa.iter().sum::<f64>() / 3.0;
        log::debug!(
            "pretrain epoch {epoch}: loss {:.4} val WA {val_wa:?}",
            loss_sum / batches as f64
        );
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_wa,
            mean_val_wa: mean,
        });
        if best.as_ref().is_none_or(|(_, _, b)| mean > *b) {
            best = Some((encoders.clone(), epoch, mean));
        }
    }
    let (encoders, epoch, val_wa) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            encoders,
            meta: CheckpointMeta {
                epoch,
                val_wa,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
        },
        history,
    })
}
