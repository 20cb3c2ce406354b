//! Dense vector and matrix primitives shared by the encoder, the vector store
//! and the pipeline.
//!
//! Everything that trains or scores in memory is stored in `f64`. Persisted
//! feature files quantize to `f32` (see [`crate::vecstore::rfv`]). Training
//! loops may run [`gemm`] in `f32` through [`with_matmul_precision`].

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{RamerError, Result};

/// Norms at or below this value are treated as degenerate.
pub const NORM_EPS: f64 = 1e-10;

/// Floor applied to the target probability inside [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// A dense vector with finite entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(elems: Vec<f64>) -> Result<Self> {
        if elems.iter().any(|x| !x.is_finite()) {
            return Err(RamerError::NonFinite("vector"));
        }
        Ok(Self(elems))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Wraps values the caller already knows to be finite.
    pub(crate) fn from_vec(elems: Vec<f64>) -> Self {
        debug_assert!(elems.iter().all(|x| x.is_finite()));
        Self(elems)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| x * alpha).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(RamerError::DimensionMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `a` to unit length. Fails with [`RamerError::DegenerateVector`]
/// when the norm is at or below [`NORM_EPS`].
pub fn l2_normalize(a: &[f64]) -> Result<Vector> {
    let norm = l2_norm(a);
    if norm <= NORM_EPS {
        return Err(RamerError::DegenerateVector { norm });
    }
    Ok(Vector::from_vec(a.iter().map(|x| x / norm).collect()))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    for norm in [na, nb] {
        if norm <= NORM_EPS {
            return Err(RamerError::DegenerateVector { norm });
        }
    }
    Ok((dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vector {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Vector::from_vec(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or(RamerError::TargetOutOfRange {
        target,
        classes: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error used for gradient checks; the denominator is floored so
/// that gradients that are both essentially zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(RamerError::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dims(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums, i.e. the bias gradient of a batch.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }
}

/// Arithmetic width of [`gemm`] products. Operands and results stay `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatmulPrecision {
    #[default]
    F64,
    F32,
}

thread_local! {
    static PRECISION: Cell<MatmulPrecision> = const { Cell::new(MatmulPrecision::F64) };
}

/// Runs `f` with [`gemm`] on the current thread switched to `precision`.
pub fn with_matmul_precision<R>(precision: MatmulPrecision, f: impl FnOnce() -> R) -> R {
    struct Restore(MatmulPrecision);
    impl Drop for Restore {
        fn drop(&mut self) {
            PRECISION.with(|p| p.set(self.0));
        }
    }
    let _restore = Restore(PRECISION.with(|p| p.replace(precision)));
    f()
}

pub fn matmul_precision() -> MatmulPrecision {
    PRECISION.with(|p| p.get())
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    if matmul_precision() == MatmulPrecision::F32 {
        let af: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
        let mut cf = vec![0f32; m * n];
        // SAFETY: same shapes and strides as the f64 buffers, checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                af.as_ptr(),
                rsa,
                csa,
                bf.as_ptr(),
                rsb,
                csb,
                0.0,
                cf.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (o, v) in c.data.iter_mut().zip(cf) {
            *o = if beta == 0.0 {
                alpha * f64::from(v)
            } else {
                alpha * f64::from(v) + beta * *o
            };
        }
        return;
    }
    // SAFETY: shapes and strides were checked against the owning buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// `a^T * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, a, true, b, false, 0.0, &mut c);
    c
}

/// `a * b^T`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a, false, b, true, 0.0, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(RamerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dot_and_norm_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_vec(&mut rng, 256);
        let b = random_vec(&mut rng, 256);
        let mut d = 0.0;
        let mut n = 0.0;
        for i in 0..256 {
            d += a[i] * b[i];
            n += a[i] * a[i];
        }
        assert!((dot(&a, &b).unwrap() - d).abs() < 1e-12);
        assert!((l2_norm(&a) - n.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn norm_and_normalize_examples() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            &*l2_normalize(&[2.0, 0.0, 0.0, 0.0]).unwrap(),
            &[1.0, 0.0, 0.0, 0.0]
        );
        let u = l2_normalize(&[1.0, 2.0, -2.0]).unwrap();
        let uu = l2_normalize(&u).unwrap();
        for (x, y) in u.iter().zip(uu.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize(&[0.0, 1e-12]),
            Err(RamerError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(&*softmax(&[0.0, 0.0]), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 7.5] {
            for p in softmax(&[c, c, c]).iter() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let uniform = vec![1.0 / 6.0; 6];
        assert!((cross_entropy(&uniform, 4).unwrap() - 6f64.ln()).abs() < 1e-12);
        let p = [0.1, 0.2, 0.3, 0.4];
        assert!((cross_entropy(&p, 2).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0], 1).unwrap(), -PROB_FLOOR.ln());
        assert!(matches!(
            cross_entropy(&p, 4),
            Err(RamerError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let c = matmul(&a, &b);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
        let at = Matrix::from_fn(3, 4, |r, c| a.get(c, r));
        let bt = Matrix::from_fn(5, 3, |r, c| b.get(c, r));
        let c2 = matmul_tn(&at, &b);
        let c3 = matmul_nt(&a, &bt);
        for (x, y) in c.as_slice().iter().zip(c2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in c.as_slice().iter().zip(c3.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_gemm_is_scoped_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Matrix::from_fn(7, 40, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(9, 40, |_, _| rng.random_range(-1.0..1.0));
        let exact = matmul_nt(&a, &b);
        let mut acc = Matrix::from_fn(7, 9, |r, c| (r + c) as f64);
        let (approx, inside) = with_matmul_precision(MatmulPrecision::F32, || {
            gemm(2.0, &a, false, &b, true, 0.5, &mut acc);
            (matmul_nt(&a, &b), matmul_precision())
        });
        assert_eq!(inside, MatmulPrecision::F32);
        assert_eq!(matmul_precision(), MatmulPrecision::F64);
        let mut worst = 0.0f64;
        for i in 0..7 {
            for j in 0..9 {
                worst = worst.max((approx.get(i, j) - exact.get(i, j)).abs());
                let want = 2.0 * exact.get(i, j) + 0.5 * (i + j) as f64;
                assert!((acc.get(i, j) - want).abs() < 1e-4);
            }
        }
        assert!(worst > 0.0 && worst < 1e-4, "{worst}");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..32).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-10.0f64..10.0, n),
                    proptest::collection::vec(-10.0f64..10.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant((a, b) in vec_pair(), alpha in 0.01f64..100.0) {
                prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
                let ab = cosine_similarity(&a, &b).unwrap();
                prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
                let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
                prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-9);
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
                let na = l2_normalize(&a).unwrap();
                let nb = l2_normalize(&b).unwrap();
                prop_assert!((dot(&na, &nb).unwrap() - ab).abs() < 1e-9);
                prop_assert!((l2_norm(&na) - 1.0).abs() < 1e-9);
            }

            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
                shift in -100.0f64..100.0,
            ) {
                let s = softmax(&xs);
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
                for (p, q) in s.iter().zip(softmax(&shifted).iter()) {
                    prop_assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }
}
