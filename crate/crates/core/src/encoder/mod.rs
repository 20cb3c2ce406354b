//! Per-modality encoder: input projection, a single-token transformer block
//! and a classifier head, with hand-written backpropagation.
//!
//! The projection runs first (input width to hidden width) and the block
//! operates at the hidden width. With one utterance-level token the
//! attention weight is exactly 1, so self-attention reduces to the value
//! projection followed by the output projection:
//!
//! ```text
//! p  = x W_in + b_in
//! y1 = LN1(p + (p W_v + b_v) W_o + b_o)
//! h  = LN2(y1 + relu(y1 W_f1 + b_f1) W_f2 + b_f2)     <- stored hidden feature
//! logits = dropout(h) W_c + b_c
//! ```

mod checkpoint;
mod train;

use rand::{Rng, RngCore};

use crate::dataset::NUM_CLASSES;
use crate::error::{RamerError, Result};
use crate::numerics::{gemm, softmax_in_place, Matrix, Vector, PROB_FLOOR};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};
pub use train::{pretrain_full_modality, EpochRecord, PretrainOutcome, Sgd, TrainConfig};

pub(crate) use checkpoint::{read_prelude, write_prelude};
pub(crate) use train::{batch_matrix, labels_of};

/// Variance floor inside both LayerNorms.
pub const LN_EPS: f64 = 1e-8;

pub const TENSOR_NAMES: [&str; 16] = [
    "w_in", "b_in", "w_v", "b_v", "w_o", "b_o", "ln1_gain", "ln1_bias", "w_f1", "b_f1", "w_f2",
    "b_f2", "ln2_gain", "ln2_bias", "w_c", "b_c",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub input: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub classes: usize,
}

impl EncoderShape {
    pub fn new(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            ffn: 2 * hidden,
            classes: NUM_CLASSES,
        }
    }

    /// `(rows, cols)` of every tensor in [`TENSOR_NAMES`] order; vectors have one row.
    pub fn tensor_shapes(&self) -> [(usize, usize); 16] {
        let (i, h, f, c) = (self.input, self.hidden, self.ffn, self.classes);
        [
            (i, h),
            (1, h),
            (h, h),
            (1, h),
            (h, h),
            (1, h),
            (1, h),
            (1, h),
            (h, f),
            (1, f),
            (f, h),
            (1, h),
            (1, h),
            (1, h),
            (h, c),
            (1, c),
        ]
    }
}

/// Parameters of one modality encoder. Also used to hold gradients and
/// optimizer state of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_f1: Matrix,
    pub b_f1: Vec<f64>,
    pub w_f2: Matrix,
    pub b_f2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_c: Matrix,
    pub b_c: Vec<f64>,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl EncoderParams {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero,
    /// LayerNorm gains one.
    pub fn init(shape: EncoderShape, rng: &mut dyn RngCore) -> Self {
        let (i, h, f, c) = (shape.input, shape.hidden, shape.ffn, shape.classes);
        Self {
            shape,
            w_in: uniform_matrix(i, h, rng),
            b_in: vec![0.0; h],
            w_v: uniform_matrix(h, h, rng),
            b_v: vec![0.0; h],
            w_o: uniform_matrix(h, h, rng),
            b_o: vec![0.0; h],
            ln1_gain: vec![1.0; h],
            ln1_bias: vec![0.0; h],
            w_f1: uniform_matrix(h, f, rng),
            b_f1: vec![0.0; f],
            w_f2: uniform_matrix(f, h, rng),
            b_f2: vec![0.0; h],
            ln2_gain: vec![1.0; h],
            ln2_bias: vec![0.0; h],
            w_c: uniform_matrix(h, c, rng),
            b_c: vec![0.0; c],
        }
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        let (i, h, f, c) = (shape.input, shape.hidden, shape.ffn, shape.classes);
        Self {
            shape,
            w_in: Matrix::zeros(i, h),
            b_in: vec![0.0; h],
            w_v: Matrix::zeros(h, h),
            b_v: vec![0.0; h],
            w_o: Matrix::zeros(h, h),
            b_o: vec![0.0; h],
            ln1_gain: vec![0.0; h],
            ln1_bias: vec![0.0; h],
            w_f1: Matrix::zeros(h, f),
            b_f1: vec![0.0; f],
            w_f2: Matrix::zeros(f, h),
            b_f2: vec![0.0; h],
            ln2_gain: vec![0.0; h],
            ln2_bias: vec![0.0; h],
            w_c: Matrix::zeros(h, c),
            b_c: vec![0.0; c],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 16] {
        [
            self.w_in.as_slice(),
            &self.b_in,
            self.w_v.as_slice(),
            &self.b_v,
            self.w_o.as_slice(),
            &self.b_o,
            &self.ln1_gain,
            &self.ln1_bias,
            self.w_f1.as_slice(),
            &self.b_f1,
            self.w_f2.as_slice(),
            &self.b_f2,
            &self.ln2_gain,
            &self.ln2_bias,
            self.w_c.as_slice(),
            &self.b_c,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 16] {
        [
            self.w_in.as_mut_slice(),
            &mut self.b_in,
            self.w_v.as_mut_slice(),
            &mut self.b_v,
            self.w_o.as_mut_slice(),
            &mut self.b_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            self.w_f1.as_mut_slice(),
            &mut self.b_f1,
            self.w_f2.as_mut_slice(),
            &mut self.b_f2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            self.w_c.as_mut_slice(),
            &mut self.b_c,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Activations of the transformer trunk kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    p: Matrix,
    v: Matrix,
    xhat1: Matrix,
    inv_std1: Vec<f64>,
    y1: Matrix,
    z: Matrix,
    q: Matrix,
    xhat2: Matrix,
    inv_std2: Vec<f64>,
    /// Hidden features, one row per input row.
    pub h: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    gemm(1.0, x, false, w, false, 0.0, &mut out);
    out.add_row_vector(b);
    out
}

/// Row-wise LayerNorm; returns `(normalized, inv_std, output)`.
fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Vec<f64>, Matrix) {
    let n = x.cols() as f64;
    let mut xhat = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
        let o = out.row_mut(r);
        for (j, v) in xhat.row(r).iter().enumerate() {
            o[j] = gain[j] * v + bias[j];
        }
    }
    (xhat, inv_std, out)
}

/// Backward through LayerNorm; accumulates gain/bias gradients and returns
/// the gradient w.r.t. the LayerNorm input.
fn layer_norm_backward(
    dout: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let n = dout.cols() as f64;
    let mut dx = Matrix::zeros(dout.rows(), dout.cols());
    for (r, &istd) in inv_std.iter().enumerate() {
        let (d, xh) = (dout.row(r), xhat.row(r));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d.len() {
            dgain[j] += d[j] * xh[j];
            dbias[j] += d[j];
            let dxh = d[j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let out = dx.row_mut(r);
        for j in 0..d.len() {
            let dxh = d[j] * gain[j];
            out[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_into(acc: &mut [f64], xs: &[f64]) {
    for (a, x) in acc.iter_mut().zip(xs) {
        *a += x;
    }
}

impl EncoderParams {
    pub fn forward_trunk(&self, x: &Matrix) -> TrunkCache {
        assert_eq!(x.cols(), self.shape.input, "encoder input width");
        let p = affine(x, &self.w_in, &self.b_in);
        let v = affine(&p, &self.w_v, &self.b_v);
        let mut r1 = affine(&v, &self.w_o, &self.b_o);
        add_into(r1.as_mut_slice(), p.as_slice());
        let (xhat1, inv_std1, y1) = layer_norm(&r1, &self.ln1_gain, &self.ln1_bias);
        let z = affine(&y1, &self.w_f1, &self.b_f1);
        let mut q = z.clone();
        for v in q.as_mut_slice() {
            *v = v.max(0.0);
        }
        let mut r2 = affine(&q, &self.w_f2, &self.b_f2);
        add_into(r2.as_mut_slice(), y1.as_slice());
        let (xhat2, inv_std2, h) = layer_norm(&r2, &self.ln2_gain, &self.ln2_bias);
        TrunkCache {
            p,
            v,
            xhat1,
            inv_std1,
            y1,
            z,
            q,
            xhat2,
            inv_std2,
            h,
        }
    }

    /// Hidden features only (inference path).
    pub fn hidden(&self, x: &Matrix) -> Matrix {
        self.forward_trunk(x).h
    }

    pub fn head(&self, h: &Matrix) -> Matrix {
        affine(h, &self.w_c, &self.b_c)
    }

    /// Backpropagates `dh` through the trunk, accumulating into `grads`
    /// (head tensors untouched).
    pub fn backward_trunk(
        &self,
        x: &Matrix,
        cache: &TrunkCache,
        dh: &Matrix,
        grads: &mut EncoderParams,
    ) {
        let dr2 = layer_norm_backward(
            dh,
            &cache.xhat2,
            &cache.inv_std2,
            &self.ln2_gain,
            &mut grads.ln2_gain,
            &mut grads.ln2_bias,
        );
        // r2 = y1 + f
        gemm(1.0, &cache.q, true, &dr2, false, 1.0, &mut grads.w_f2);
        add_into(&mut grads.b_f2, &dr2.column_sums());
        let mut dz = Matrix::zeros(dr2.rows(), self.shape.ffn);
        gemm(1.0, &dr2, false, &self.w_f2, true, 0.0, &mut dz);
        for (d, z) in dz.as_mut_slice().iter_mut().zip(cache.z.as_slice()) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(1.0, &cache.y1, true, &dz, false, 1.0, &mut grads.w_f1);
        add_into(&mut grads.b_f1, &dz.column_sums());
        let mut dy1 = dr2;
        gemm(1.0, &dz, false, &self.w_f1, true, 1.0, &mut dy1);

        let dr1 = layer_norm_backward(
            &dy1,
            &cache.xhat1,
            &cache.inv_std1,
            &self.ln1_gain,
            &mut grads.ln1_gain,
            &mut grads.ln1_bias,
        );
        // r1 = p + (v W_o + b_o), v = p W_v + b_v
        gemm(1.0, &cache.v, true, &dr1, false, 1.0, &mut grads.w_o);
        add_into(&mut grads.b_o, &dr1.column_sums());
        let mut dv = Matrix::zeros(dr1.rows(), self.shape.hidden);
        gemm(1.0, &dr1, false, &self.w_o, true, 0.0, &mut dv);
        gemm(1.0, &cache.p, true, &dv, false, 1.0, &mut grads.w_v);
        add_into(&mut grads.b_v, &dv.column_sums());
        let mut dp = dr1;
        gemm(1.0, &dv, false, &self.w_v, true, 1.0, &mut dp);
        gemm(1.0, x, true, &dp, false, 1.0, &mut grads.w_in);
        add_into(&mut grads.b_in, &dp.column_sums());
    }

    /// Mean cross-entropy of the classifier head over a batch, with gradients
    /// for every tensor. `mask` holds inverted-dropout scales applied to `h`.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        targets: &[usize],
        mask: Option<&Matrix>,
    ) -> (f64, EncoderParams) {
        let cache = self.forward_trunk(x);
        let mut h_in = cache.h.clone();
        if let Some(mask) = mask {
            for (v, m) in h_in.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
        }
        let logits = self.head(&h_in);
        let (loss, dlogits) = softmax_xent_grad(&logits, targets);
        let mut grads = EncoderParams::zeros(self.shape);
        gemm(1.0, &h_in, true, &dlogits, false, 0.0, &mut grads.w_c);
        grads.b_c = dlogits.column_sums();
        let mut dh = Matrix::zeros(x.rows(), self.shape.hidden);
        gemm(1.0, &dlogits, false, &self.w_c, true, 0.0, &mut dh);
        if let Some(mask) = mask {
            for (d, m) in dh.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *d *= m;
            }
        }
        self.backward_trunk(x, &cache, &dh, &mut grads);
        (loss, grads)
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_xent_grad(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), targets.len());
    let scale = 1.0 / targets.len().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        softmax_in_place(row);
        loss -= row[t].max(PROB_FLOOR).ln();
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (loss * scale, grad)
}

/// Inverted-dropout scales: `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut dyn RngCore) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Infer,
    Train { dropout: f64 },
}

/// Single-sample forward pass returning the hidden feature (before dropout)
/// and the classifier logits.
pub fn encoder_forward(
    x: &[f64],
    params: &EncoderParams,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Vector, Vector)> {
    if x.len() != params.shape.input {
        return Err(RamerError::DimensionMismatch {
            expected: params.shape.input,
            got: x.len(),
        });
    }
    let xm = Matrix::from_rows(&[x], x.len())?;
    let h = params.hidden(&xm);
    let mut h_in = h.clone();
    if let Mode::Train { dropout } = mode {
        let mask = dropout_mask(1, params.shape.hidden, dropout, rng);
        for (v, m) in h_in.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= m;
        }
    }
    let logits = params.head(&h_in);
    Ok((
        Vector::from_vec(h.row(0).to_vec()),
        Vector::from_vec(logits.row(0).to_vec()),
    ))
}

/// Single-sample loss gradient. `mask` fixes the dropout pattern on `h`
/// (`None` means inference mode).
pub fn encoder_backward(
    x: &[f64],
    params: &EncoderParams,
    target: usize,
    mask: Option<&[f64]>,
) -> Result<(f64, EncoderParams)> {
    if x.len() != params.shape.input {
        return Err(RamerError::DimensionMismatch {
            expected: params.shape.input,
            got: x.len(),
        });
    }
    if target >= params.shape.classes {
        return Err(RamerError::TargetOutOfRange {
            target,
            classes: params.shape.classes,
        });
    }
    let xm = Matrix::from_rows(&[x], x.len())?;
    let mask = mask
        .map(|m| Matrix::from_vec(1, params.shape.hidden, m.to_vec()))
        .transpose()?;
    Ok(params.loss_and_grad(&xm, &[target], mask.as_ref()))
}

#[cfg(test)]
mod tests;
