use crate::error::{RamerError, Result};
use crate::numerics::{l2_norm, NORM_EPS};

/// Unit roundoff of `f32`.
const F32_EPS: f64 = 5.960_464_477_539_063e-8;
/// Unit roundoff of `f64`.
const F64_EPS: f64 = 1.110_223_024_625_156_5e-16;

/// Ranking rule of a vector store scan. Keys are ordered descending; the
/// reported score is derived from the key.
pub trait SimilarityMetric: Send + Sync {
    fn name(&self) -> &'static str;

    /// Transforms a query once before scanning.
    fn prepare_query(&self, query: &[f64]) -> Result<Vec<f64>>;

    /// Exact key of record `r` (norm `r_norm`) against a prepared query.
    fn key(&self, query: &[f64], r: &[f32], r_norm: f64) -> f64;

    /// Key and its absolute error bound, given `dot` approximating the inner
    /// product of the prepared query and `r` within `dot_err`.
    fn key_from_dot(
        &self,
        dot: f64,
        dot_err: f64,
        q_sq: f64,
        r_norm: f64,
        dim: usize,
    ) -> (f64, f64);

    /// [`Self::key_from_dot`] over a block of records with `f32` dots.
    /// Writes keys into `out` and returns the largest error bound.
    fn keys_from_dots(
        &self,
        dots: &[f32],
        norms: &[f64],
        q_sq: f64,
        dim: usize,
        out: &mut [f64],
    ) -> f64 {
        let q_norm = q_sq.sqrt() * (1.0 + 1e-6);
        let mut max_err = 0.0f64;
        for ((o, &d), &r_norm) in out.iter_mut().zip(dots).zip(norms) {
            let err = f32_dot_error(q_norm, r_norm, dim);
            let (key, key_err) = self.key_from_dot(f64::from(d), err, q_sq, r_norm, dim);
            *o = key;
            max_err = max_err.max(key_err);
        }
        max_err
    }

    /// Score reported in a [`super::SearchHit`].
    fn score(&self, key: f64) -> f64;

    /// `true` if larger scores rank first.
    fn higher_is_better(&self) -> bool {
        true
    }
}

/// Worst-case error of an `f32` inner product of an `f64` query (rounded to
/// `f32`) with an `f32` record, relative to the exact `f64` evaluation.
pub(crate) fn f32_dot_error(q_norm: f64, r_norm: f64, dim: usize) -> f64 {
    4.0 * (dim as f64 + 2.0) * F32_EPS * q_norm * r_norm + dim as f64 * 1e-37
}

/// Cosine similarity; the query is normalized, records are divided by
/// their stored norm.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cosine;

impl SimilarityMetric for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn prepare_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.iter().any(|x| !x.is_finite()) {
            return Err(RamerError::NonFinite("query vector"));
        }
        let norm = l2_norm(query);
        if norm <= NORM_EPS {
            return Err(RamerError::DegenerateVector { norm });
        }
        Ok(query.iter().map(|x| x / norm).collect())
    }

    fn key(&self, query: &[f64], r: &[f32], r_norm: f64) -> f64 {
        let mut acc = 0.0;
        for (q, v) in query.iter().zip(r) {
            acc += q * f64::from(*v);
        }
        acc / r_norm
    }

    fn key_from_dot(
        &self,
        dot: f64,
        dot_err: f64,
        _q_sq: f64,
        r_norm: f64,
        _dim: usize,
    ) -> (f64, f64) {
        (dot / r_norm, 2.0 * dot_err / r_norm)
    }

    // Same bound as the default with the record norm cancelled out.
    fn keys_from_dots(
        &self,
        dots: &[f32],
        norms: &[f64],
        q_sq: f64,
        dim: usize,
        out: &mut [f64],
    ) -> f64 {
        let q_norm = q_sq.sqrt() * (1.0 + 1e-6);
        let mut min_norm = f64::INFINITY;
        for ((o, &d), &r_norm) in out.iter_mut().zip(dots).zip(norms) {
            *o = f64::from(d) / r_norm;
            min_norm = min_norm.min(r_norm);
        }
        8.0 * (dim as f64 + 2.0) * F32_EPS * q_norm + 2.0 * dim as f64 * 1e-37 / min_norm
    }

    fn score(&self, key: f64) -> f64 {
        key
    }
}

/// Euclidean distance on unnormalized vectors; ranks by ascending distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl SimilarityMetric for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn prepare_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.iter().any(|x| !x.is_finite()) {
            return Err(RamerError::NonFinite("query vector"));
        }
        Ok(query.to_vec())
    }

    fn key(&self, query: &[f64], r: &[f32], _r_norm: f64) -> f64 {
        let mut acc = 0.0;
        for (q, v) in query.iter().zip(r) {
            let d = q - f64::from(*v);
            acc += d * d;
        }
        -acc
    }

    fn key_from_dot(
        &self,
        dot: f64,
        dot_err: f64,
        q_sq: f64,
        r_norm: f64,
        dim: usize,
    ) -> (f64, f64) {
        let r_sq = r_norm * r_norm;
        let key = -(q_sq - 2.0 * dot + r_sq);
        let err = 2.0 * dot_err + 8.0 * (dim as f64 + 4.0) * F64_EPS * (q_sq + r_sq);
        (key, err)
    }

    fn score(&self, key: f64) -> f64 {
        (-key).max(0.0).sqrt()
    }

    fn higher_is_better(&self) -> bool {
        false
    }
}
