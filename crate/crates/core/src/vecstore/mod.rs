//! Per-modality hidden-feature databases aligned by sample id, with exact
//! top-K search.
//!
//! Stored vectors are `f32`. Exact keys are always evaluated in `f64` against
//! the `f32` values, so a store searched in memory and the same store loaded
//! from disk rank identically. Batch search screens records with an `f32`
//! GEMM and a rigorous error bound, then rescores the survivors exactly; its
//! output is identical to [`ModalityStore::search_topk`].

mod metric;
pub mod rfv;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bytes::sha256_hex;
use crate::dataset::{Corpus, EmotionLabel, Modality, ScaleTier};
use crate::encoder::Checkpoint;
use crate::error::{RamerError, Result};
use crate::numerics::{Matrix, Vector, NORM_EPS};

pub use metric::{Cosine, Euclidean, SimilarityMetric};
use rfv::{decode_rfv, encode_rfv, RfvTable};

/// Queries per GEMM block in [`ModalityStore::search_batch`].
const QUERY_BLOCK: usize = 128;
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub sample_id: String,
    /// Row in the store (shared by all stores of an [`AlignedStore`]).
    pub row: usize,
    /// Cosine similarity, or distance for the euclidean metric.
    pub score: f64,
}

/// Shared id namespace of one or more stores.
#[derive(Debug, Clone, PartialEq)]
pub struct IdIndex {
    ids: Vec<String>,
    rows: HashMap<String, usize>,
}

impl IdIndex {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut rows = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(RamerError::Empty("sample id"));
            }
            if rows.insert(id.clone(), i).is_some() {
                return Err(RamerError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }
}

/// Rows barred from search results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionSet {
    excluded: Vec<bool>,
    count: usize,
}

impl ExclusionSet {
    pub fn none(rows: usize) -> Self {
        Self {
            excluded: vec![false; rows],
            count: 0,
        }
    }

    /// Excludes every id of `ids` present in `index`; others are ignored.
    pub fn from_ids<'a>(index: &IdIndex, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = Self::none(index.len());
        for id in ids {
            if let Some(r) = index.row_of(id) {
                set.insert(r);
            }
        }
        set
    }

    pub fn insert(&mut self, row: usize) {
        if !self.excluded[row] {
            self.excluded[row] = true;
            self.count += 1;
        }
    }

    pub fn contains(&self, row: usize) -> bool {
        self.excluded[row]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn rows(&self) -> usize {
        self.excluded.len()
    }
}

/// One modality's database.
#[derive(Debug, Clone)]
pub struct ModalityStore {
    modality: Modality,
    dim: usize,
    index: Arc<IdIndex>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl PartialEq for ModalityStore {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality
            && self.dim == other.dim
            && self.index.ids == other.index.ids
            && self.data == other.data
    }
}

fn record_norm(r: &[f32]) -> f64 {
    r.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

fn by_key_then_id(index: &IdIndex) -> impl Fn(&(f64, usize), &(f64, usize)) -> Ordering + '_ {
    move |a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| index.id(a.1).cmp(index.id(b.1)))
    }
}

impl ModalityStore {
    /// Wraps row-major `data` (`index.len() x dim`). Every row must be finite
    /// with a norm above [`NORM_EPS`].
    pub fn new(
        modality: Modality,
        dim: usize,
        index: Arc<IdIndex>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(RamerError::Empty("store dimension"));
        }
        if data.len() != index.len() * dim {
            return Err(RamerError::DimensionMismatch {
                expected: index.len() * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RamerError::NonFinite("store record"));
        }
        let norms: Vec<f64> = data.chunks_exact(dim).map(record_norm).collect();
        if let Some(&norm) = norms.iter().find(|&&n| n <= NORM_EPS) {
            return Err(RamerError::DegenerateVector { norm });
        }
        Ok(Self {
            modality,
            dim,
            index,
            data,
            norms,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &IdIndex {
        &self.index
    }

    pub fn record(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn record_f64(&self, row: usize) -> Vector {
        Vector::from_vec(self.record(row).iter().map(|&v| f64::from(v)).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.row_of(id).map(|r| self.record(r))
    }

    fn check_search(&self, query_dim: usize, k: usize, excl: &ExclusionSet) -> Result<()> {
        if k == 0 {
            return Err(RamerError::InvalidConfig("k must be at least 1".into()));
        }
        if query_dim != self.dim {
            return Err(RamerError::DimensionMismatch {
                expected: self.dim,
                got: query_dim,
            });
        }
        if excl.rows() != self.len() {
            return Err(RamerError::DimensionMismatch {
                expected: self.len(),
                got: excl.rows(),
            });
        }
        Ok(())
    }

    fn hits(
        &self,
        mut keyed: Vec<(f64, usize)>,
        k: usize,
        metric: &dyn SimilarityMetric,
    ) -> Vec<SearchHit> {
        keyed.sort_unstable_by(by_key_then_id(&self.index));
        keyed.truncate(k);
        keyed
            .into_iter()
            .map(|(key, row)| SearchHit {
                sample_id: self.index.id(row).to_string(),
                row,
                score: metric.score(key),
            })
            .collect()
    }

    /// Exact top-`k` scan skipping excluded rows. Results are ordered by
    /// metric preference, ties by ascending sample id.
    pub fn search_topk(
        &self,
        query: &[f64],
        k: usize,
        exclusions: &ExclusionSet,
        metric: &dyn SimilarityMetric,
    ) -> Result<Vec<SearchHit>> {
        self.check_search(query.len(), k, exclusions)?;
        if exclusions.len() == self.len() {
            return Err(RamerError::EmptyStore);
        }
        let q = metric.prepare_query(query)?;
        let keyed: Vec<(f64, usize)> = (0..self.len())
            .filter(|&r| !exclusions.contains(r))
            .map(|r| (metric.key(&q, self.record(r), self.norms[r]), r))
            .collect();
        Ok(self.hits(keyed, k, metric))
    }

    /// Top-`k` for every row of `queries`. `extra[i]` optionally excludes one
    /// more row for query `i` (typically the query's own record). Output is
    /// identical to calling [`Self::search_topk`] per query.
    pub fn search_batch(
        &self,
        queries: &Matrix,
        k: usize,
        exclusions: &ExclusionSet,
        extra: &[Option<usize>],
        metric: &dyn SimilarityMetric,
    ) -> Result<Vec<Vec<SearchHit>>> {
        self.check_search(queries.cols(), k, exclusions)?;
        assert_eq!(
            extra.len(),
            queries.rows(),
            "one extra exclusion slot per query"
        );
        let n = self.len();
        let prepared: Vec<Vec<f64>> = (0..queries.rows())
            .map(|i| metric.prepare_query(queries.row(i)))
            .collect::<Result<_>>()?;
        for e in extra {
            let effective =
                n - exclusions.len() - usize::from(e.is_some_and(|r| !exclusions.contains(r)));
            if effective == 0 {
                return Err(RamerError::EmptyStore);
            }
        }
        let mut out = Vec::with_capacity(queries.rows());
        let mut dots = vec![0f32; QUERY_BLOCK.min(queries.rows().max(1)) * n];
        for start in (0..queries.rows()).step_by(QUERY_BLOCK) {
            let block = &prepared[start..(start + QUERY_BLOCK).min(prepared.len())];
            let b = block.len();
            let qf: Vec<f32> = block
                .iter()
                .flat_map(|q| q.iter().map(|&v| v as f32))
                .collect();
            let dots = &mut dots[..b * n];
            // SAFETY: qf is b x dim, data is n x dim (read transposed), dots is b x n.
            unsafe {
                matrixmultiply::sgemm(
                    b,
                    self.dim,
                    n,
                    1.0,
                    qf.as_ptr(),
                    self.dim as isize,
                    1,
                    self.data.as_ptr(),
                    1,
                    self.dim as isize,
                    0.0,
                    dots.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            let results: Vec<Vec<SearchHit>> = block
                .par_iter()
                .enumerate()
                .map_init(
                    || vec![0.0; n],
                    |keys, (i, q)| {
                        let row_dots = &dots[i * n..(i + 1) * n];
                        self.screen_and_rescore(
                            q,
                            row_dots,
                            keys,
                            k,
                            exclusions,
                            extra[start + i],
                            metric,
                        )
                    },
                )
                .collect();
            out.extend(results);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn screen_and_rescore(
        &self,
        q: &[f64],
        dots: &[f32],
        keys: &mut [f64],
        k: usize,
        exclusions: &ExclusionSet,
        extra: Option<usize>,
        metric: &dyn SimilarityMetric,
    ) -> Vec<SearchHit> {
        let q_sq: f64 = q.iter().map(|v| v * v).sum();
        let max_err = metric.keys_from_dots(dots, &self.norms, q_sq, self.dim, keys);
        let eligible = |r: usize| !exclusions.contains(r) && extra != Some(r);
        // k-th largest approximate key among eligible rows, kept in a small
        // ascending buffer
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for (r, &key) in keys.iter().enumerate() {
            if best.len() == k && key <= best[0] {
                continue;
            }
            if !eligible(r) {
                continue;
            }
            let at = best.partition_point(|&b| b < key);
            best.insert(at, key);
            if best.len() > k {
                best.remove(0);
            }
        }
        // any row whose exact key can reach the exact k-th key
        let threshold = best[0] - 2.0 * max_err;
        let keyed: Vec<(f64, usize)> = keys
            .iter()
            .enumerate()
            .filter(|&(r, &key)| key >= threshold && eligible(r))
            .map(|(r, _)| (metric.key(q, self.record(r), self.norms[r]), r))
            .collect();
        self.hits(keyed, k, metric)
    }
}

/// Tri-modal stores over one id namespace, plus optional raw-embedding
/// stores over the same ids.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedStore {
    index: Arc<IdIndex>,
    labels: Vec<Option<EmotionLabel>>,
    hidden: [ModalityStore; 3],
    raw: Option<Arc<[ModalityStore; 3]>>,
    pub tier: ScaleTier,
    pub checkpoint_hash: String,
}

impl AlignedStore {
    pub fn new(
        index: Arc<IdIndex>,
        labels: Vec<Option<EmotionLabel>>,
        hidden: [ModalityStore; 3],
        tier: ScaleTier,
        checkpoint_hash: String,
    ) -> Result<Self> {
        for (m, s) in Modality::ALL.iter().zip(&hidden) {
            if s.modality != *m || s.index.ids != index.ids {
                return Err(RamerError::InvalidConfig(format!(
                    "{} store is not aligned with the shared id set",
                    m.name()
                )));
            }
        }
        if labels.len() != index.len() {
            return Err(RamerError::DimensionMismatch {
                expected: index.len(),
                got: labels.len(),
            });
        }
        Ok(Self {
            index,
            labels,
            hidden,
            raw: None,
            tier,
            checkpoint_hash,
        })
    }

    pub fn index(&self) -> &IdIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn label(&self, row: usize) -> Option<EmotionLabel> {
        self.labels[row]
    }

    pub fn store(&self, m: Modality) -> &ModalityStore {
        &self.hidden[m.index()]
    }

    pub fn raw_store(&self, m: Modality) -> Option<&ModalityStore> {
        self.raw.as_deref().map(|r| &r[m.index()])
    }

    pub fn has_raw(&self) -> bool {
        self.raw.is_some()
    }

    /// Attaches raw-embedding stores built over the same ids.
    pub fn set_raw(&mut self, raw: Arc<[ModalityStore; 3]>) -> Result<()> {
        for (m, s) in Modality::ALL.iter().zip(raw.iter()) {
            if s.modality != *m || s.index.ids != self.index.ids {
                return Err(RamerError::InvalidConfig(format!(
                    "raw {} store is not aligned with the shared id set",
                    m.name()
                )));
            }
        }
        self.raw = Some(raw);
        Ok(())
    }

    pub fn exclusions<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> ExclusionSet {
        ExclusionSet::from_ids(&self.index, ids)
    }

    /// Stored vectors of `target` for each id, in order.
    pub fn cross_lookup(&self, ids: &[&str], target: Modality) -> Result<Vec<Vector>> {
        let store = self.store(target);
        ids.iter()
            .map(|id| {
                self.index
                    .row_of(id)
                    .map(|r| store.record_f64(r))
                    .ok_or_else(|| RamerError::UnknownId(id.to_string()))
            })
            .collect()
    }

    fn files(&self) -> impl Iterator<Item = (&ModalityStore, &'static str)> {
        let raw = self.raw.as_deref().into_iter().flatten();
        self.hidden
            .iter()
            .map(|s| (s, ""))
            .chain(raw.map(|s| (s, "raw_")))
    }

    fn manifest(&self, files: Vec<StoreFile>) -> StoreManifest {
        StoreManifest {
            format: STORE_FORMAT.into(),
            tier: self.tier,
            checkpoint_hash: self.checkpoint_hash.clone(),
            count: self.len(),
            ids: self.index.ids.clone(),
            labels: self
                .labels
                .iter()
                .map(|l| l.map(|l| l.name().to_string()))
                .collect(),
            files,
        }
    }

    /// SHA-256 of the serialized manifest, which covers every file's hash.
    pub fn hash(&self) -> String {
        let files = self
            .files()
            .map(|(s, prefix)| StoreFile {
                name: file_name(s, prefix),
                sha256: sha256_hex(&encode_store(s)),
            })
            .collect();
        sha256_hex(&manifest_bytes(&self.manifest(files)))
    }
}

const STORE_FORMAT: &str = "ramer-aligned-store/1";
const STORE_MANIFEST: &str = "store.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreFile {
    name: String,
    sha256: String,
}

fn file_name(store: &ModalityStore, prefix: &str) -> String {
    format!("{prefix}{}.rfv", store.modality.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreManifest {
    format: String,
    tier: ScaleTier,
    checkpoint_hash: String,
    count: usize,
    ids: Vec<String>,
    labels: Vec<Option<String>>,
    files: Vec<StoreFile>,
}

fn manifest_bytes(m: &StoreManifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

fn encode_store(store: &ModalityStore) -> Vec<u8> {
    encode_rfv(
        store.modality,
        store.dim,
        store.len(),
        (0..store.len()).map(|r| (store.index.id(r), store.record(r))),
    )
}

/// Writes `audio.rfv`, `video.rfv`, `text.rfv` (plus `raw_*.rfv` when raw
/// stores are attached) and `store.json` into `dir`.
pub fn save_store(dir: &Path, store: &AlignedStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (s, prefix) in store.files() {
        let bytes = encode_store(s);
        let name = file_name(s, prefix);
        fs::write(dir.join(&name), &bytes)?;
        files.push(StoreFile {
            name,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = store.manifest(files);
    fs::write(dir.join(STORE_MANIFEST), manifest_bytes(&manifest))?;
    Ok(())
}

fn load_table(dir: &Path, file: &StoreFile) -> Result<RfvTable> {
    let path = dir.join(&file.name);
    let bytes = fs::read(&path)?;
    let found = sha256_hex(&bytes);
    if found != file.sha256 {
        return Err(RamerError::StaleArtifact {
            what: format!("store file {}", path.display()),
            expected: file.sha256.clone(),
            found,
        });
    }
    decode_rfv(&path, &bytes)
}

pub fn load_store(dir: &Path) -> Result<AlignedStore> {
    let manifest_path = dir.join(STORE_MANIFEST);
    let manifest: StoreManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != STORE_FORMAT {
        return Err(RamerError::Format {
            path: manifest_path,
            offset: 0,
            msg: format!("unsupported store format {:?}", manifest.format),
        });
    }
    if manifest.ids.len() != manifest.count || manifest.labels.len() != manifest.count {
        return Err(RamerError::Format {
            path: manifest_path,
            offset: 0,
            msg: "id/label list length does not match count".into(),
        });
    }
    let index = Arc::new(IdIndex::new(manifest.ids.clone())?);
    let labels = manifest
        .labels
        .iter()
        .map(|l| l.as_deref().map(str::parse::<EmotionLabel>).transpose())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|msg| RamerError::Format {
            path: manifest_path.clone(),
            offset: 0,
            msg,
        })?;
    let mut stores = Vec::new();
    let mut raw = Vec::new();
    for file in &manifest.files {
        let table = load_table(dir, file)?;
        if table.ids != manifest.ids {
            return Err(RamerError::Format {
                path: dir.join(&file.name),
                offset: 0,
                msg: "ids are not aligned with store.json".into(),
            });
        }
        let expected = if file.name.starts_with("raw_") {
            raw.len()
        } else {
            stores.len()
        };
        if table.modality.index() != expected {
            return Err(RamerError::Format {
                path: dir.join(&file.name),
                offset: 0,
                msg: format!(
                    "unexpected modality {} at position {expected}",
                    table.modality.name()
                ),
            });
        }
        let store = ModalityStore::new(table.modality, table.dim, index.clone(), table.data)?;
        if file.name.starts_with("raw_") {
            raw.push(store);
        } else {
            stores.push(store);
        }
    }
    let hidden: [ModalityStore; 3] = stores.try_into().map_err(|v: Vec<_>| RamerError::Format {
        path: manifest_path.clone(),
        offset: 0,
        msg: format!("expected 3 hidden stores, found {}", v.len()),
    })?;
    let mut store = AlignedStore::new(
        index,
        labels,
        hidden,
        manifest.tier,
        manifest.checkpoint_hash,
    )?;
    if !raw.is_empty() {
        let raw: [ModalityStore; 3] = raw.try_into().map_err(|v: Vec<_>| RamerError::Format {
            path: manifest_path.clone(),
            offset: 0,
            msg: format!("expected 3 raw stores, found {}", v.len()),
        })?;
        store.set_raw(Arc::new(raw))?;
    }
    Ok(store)
}

fn tier_samples<'a>(
    corpus: &'a Corpus,
    members: &BTreeSet<String>,
) -> Result<Vec<&'a crate::dataset::Sample>> {
    members
        .iter()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| RamerError::UnknownId(id.clone()))
        })
        .collect()
}

fn require_embeddings(samples: &[&crate::dataset::Sample]) -> Result<()> {
    for s in samples {
        for m in Modality::ALL {
            if s.embedding(m).is_none() {
                return Err(RamerError::MissingEmbedding {
                    id: s.id.clone(),
                    modality: m.name(),
                });
            }
        }
    }
    Ok(())
}

/// Encodes every tier member with the checkpoint's encoders and stores the
/// L2-normalized hidden features. Rows follow ascending sample id.
pub fn build_store(
    corpus: &Corpus,
    checkpoint: &Checkpoint,
    tier: ScaleTier,
    members: &BTreeSet<String>,
) -> Result<AlignedStore> {
    checkpoint.ensure_dims(&corpus.dims())?;
    let samples = tier_samples(corpus, members)?;
    require_embeddings(&samples)?;
    let index = Arc::new(IdIndex::new(members.iter().cloned().collect())?);
    let hidden_dim = checkpoint.hidden();
    let mut stores = Vec::with_capacity(3);
    for m in Modality::ALL {
        let enc = checkpoint.encoder(m);
        let mut data = Vec::with_capacity(samples.len() * hidden_dim);
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let x = crate::encoder::batch_matrix(chunk, m, enc.shape.input)?;
            let h = enc.hidden(&x);
            for r in 0..h.rows() {
                let row = h.row(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= NORM_EPS {
                    return Err(RamerError::DegenerateVector { norm });
                }
                data.extend(row.iter().map(|v| (v / norm) as f32));
            }
        }
        stores.push(ModalityStore::new(m, hidden_dim, index.clone(), data)?);
    }
    let hidden: [ModalityStore; 3] = stores.try_into().expect("three modalities");
    let labels = samples.iter().map(|s| s.label).collect();
    AlignedStore::new(index, labels, hidden, tier, checkpoint.hash())
}

/// Raw-embedding stores over the same members and row order as
/// [`build_store`]. Vectors are kept unnormalized.
pub fn build_raw_stores(corpus: &Corpus, members: &BTreeSet<String>) -> Result<[ModalityStore; 3]> {
    let samples = tier_samples(corpus, members)?;
    require_embeddings(&samples)?;
    let index = Arc::new(IdIndex::new(members.iter().cloned().collect())?);
    let dims = corpus.dims();
    let mut stores = Vec::with_capacity(3);
    for m in Modality::ALL {
        let mut data = Vec::with_capacity(samples.len() * dims.get(m));
        for s in &samples {
            data.extend_from_slice(s.embedding(m).expect("checked above"));
        }
        stores.push(ModalityStore::new(m, dims.get(m), index.clone(), data)?);
    }
    Ok(stores.try_into().expect("three modalities"))
}

#[cfg(test)]
mod tests;
