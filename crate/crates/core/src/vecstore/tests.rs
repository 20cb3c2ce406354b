#![allow(clippy::needless_range_loop)]

use super::*;
use crate::dataset::{generate_synthetic, SyntheticConfig};
use crate::encoder::{CheckpointMeta, EncoderParams, EncoderShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn store_of(rows: &[Vec<f32>], ids: Vec<String>) -> ModalityStore {
    let dim = rows[0].len();
    let index = Arc::new(IdIndex::new(ids).unwrap());
    ModalityStore::new(Modality::Audio, dim, index, rows.concat()).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    // Deliberately not in row order so id tie-breaks differ from row tie-breaks.
    (0..n)
        .map(|i| format!("id{:04}", (i * 7919) % 10007))
        .collect()
}

/// Brute-force ranking: (score, id) with ties by ascending id.
fn oracle(
    rows: &[Vec<f32>],
    ids: &[String],
    q: &[f64],
    k: usize,
    skip: &[usize],
    euclid: bool,
) -> Vec<String> {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &String)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(i, r)| {
            let r: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            let s = if euclid {
                -q.iter()
                    .zip(&r)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            } else {
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                q.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / (qn * rn)
            };
            (s, &ids[i])
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(_, id)| id.clone())
        .collect()
}

fn hit_ids(hits: &[SearchHit]) -> Vec<String> {
    hits.iter().map(|h| h.sample_id.clone()).collect()
}

#[test]
fn topk_matches_brute_force_with_duplicate_ties() {
    let mut rows = random_rows(300, 12, 1);
    // exact duplicates force ties that must resolve by id
    for i in 0..20 {
        rows.push(rows[i * 3].clone());
    }
    let ids = ids(rows.len());
    let store = store_of(&rows, ids.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 0..30 {
        let q: Vec<f64> = if t % 3 == 0 {
            rows[t].iter().map(|&v| v as f64).collect()
        } else {
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        for (metric, euclid) in [
            (&Cosine as &dyn SimilarityMetric, false),
            (&Euclidean, true),
        ] {
            let hits = store
                .search_topk(&q, 10, &ExclusionSet::none(rows.len()), metric)
                .unwrap();
            assert_eq!(hit_ids(&hits), oracle(&rows, &ids, &q, 10, &[], euclid));
        }
    }
}

#[test]
fn equal_scores_break_ties_by_id() {
    let rows = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![2.0, 0.0],
    ];
    let store = store_of(&rows, vec!["c".into(), "a".into(), "b".into(), "d".into()]);
    let hits = store
        .search_topk(&[1.0, 0.0], 4, &ExclusionSet::none(4), &Cosine)
        .unwrap();
    // c, b and d all have cosine 1; scale does not matter for cosine.
    assert_eq!(hit_ids(&hits), ["b", "c", "d", "a"]);
    assert_eq!(hits[0].score, 1.0);
    assert_eq!(hits[3].score, 0.0);

    let hits = store
        .search_topk(&[1.0, 0.0], 4, &ExclusionSet::none(4), &Euclidean)
        .unwrap();
    assert_eq!(hit_ids(&hits), ["b", "c", "d", "a"]);
    assert_eq!(
        hits.iter().map(|h| h.score).collect::<Vec<_>>(),
        [0.0, 0.0, 1.0, 2f64.sqrt()]
    );
}

#[test]
fn excluded_rows_never_returned() {
    let rows = random_rows(100, 8, 3);
    let store = store_of(&rows, ids(100));
    for r in 0..100 {
        let q: Vec<f64> = rows[r].iter().map(|&v| v as f64).collect();
        let mut ex = ExclusionSet::none(100);
        ex.insert(r);
        let hits = store.search_topk(&q, 100, &ex, &Cosine).unwrap();
        assert_eq!(hits.len(), 99);
        assert!(hits.iter().all(|h| h.row != r));
    }
}

#[test]
fn exclusion_by_id_and_empty_store() {
    let rows = random_rows(5, 4, 4);
    let names: Vec<String> = ["a", "b", "c", "d", "e"].map(String::from).to_vec();
    let store = store_of(&rows, names.clone());
    let ex = ExclusionSet::from_ids(store.index(), ["b", "zz", "d"]);
    assert_eq!(ex.len(), 2);
    let hits = store.search_topk(&[1.0; 4], 10, &ex, &Cosine).unwrap();
    assert_eq!(hits.len(), 3);
    let all = ExclusionSet::from_ids(store.index(), names.iter().map(String::as_str));
    assert!(matches!(
        store.search_topk(&[1.0; 4], 1, &all, &Cosine),
        Err(RamerError::EmptyStore)
    ));
    let q = Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
    assert!(matches!(
        store.search_batch(&q, 1, &all, &[None], &Cosine),
        Err(RamerError::EmptyStore)
    ));
}

#[test]
fn bad_search_arguments() {
    let store = store_of(&random_rows(5, 4, 5), ids(5));
    let none = ExclusionSet::none(5);
    assert!(store.search_topk(&[1.0; 3], 1, &none, &Cosine).is_err());
    assert!(store.search_topk(&[1.0; 4], 0, &none, &Cosine).is_err());
    assert!(store.search_topk(&[0.0; 4], 1, &none, &Cosine).is_err());
    assert!(store
        .search_topk(&[1.0; 4], 1, &ExclusionSet::none(4), &Cosine)
        .is_err());
    assert!(store
        .search_topk(&[f64::NAN; 4], 1, &none, &Euclidean)
        .is_err());
}

#[test]
fn store_rejects_bad_records() {
    let index = Arc::new(IdIndex::new(vec!["a".into(), "b".into()]).unwrap());
    assert!(
        ModalityStore::new(Modality::Text, 2, index.clone(), vec![1.0, 0.0, 0.0, 0.0]).is_err()
    );
    assert!(ModalityStore::new(
        Modality::Text,
        2,
        index.clone(),
        vec![1.0, f32::NAN, 1.0, 0.0]
    )
    .is_err());
    assert!(ModalityStore::new(Modality::Text, 2, index, vec![1.0; 3]).is_err());
    assert!(IdIndex::new(vec!["a".into(), "a".into()]).is_err());
}

#[test]
fn metrics_agree_on_unit_vectors() {
    let rows: Vec<Vec<f32>> = random_rows(200, 16, 6)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let store = store_of(&rows, ids(200));
    for t in 0..20 {
        let q: Vec<f64> = rows[t].iter().map(|&v| v as f64).collect();
        let ex = ExclusionSet::none(200);
        let a = store.search_topk(&q, 15, &ex, &Cosine).unwrap();
        let b = store.search_topk(&q, 15, &ex, &Euclidean).unwrap();
        assert_eq!(hit_ids(&a), hit_ids(&b));
    }
}

#[test]
fn batch_search_equals_single_queries() {
    let mut rows = random_rows(700, 24, 7);
    for i in 0..40 {
        rows.push(rows[i].clone());
    }
    let n = rows.len();
    let store = store_of(&rows, ids(n));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut excl = ExclusionSet::none(n);
    for r in (0..n).step_by(11) {
        excl.insert(r);
    }
    let mut qs = Vec::new();
    let mut extra = Vec::new();
    for i in 0..300 {
        if i % 2 == 0 {
            qs.push(rows[i].iter().map(|&v| v as f64).collect::<Vec<_>>());
            extra.push(Some(i));
        } else {
            qs.push((0..24).map(|_| rng.random_range(-3.0..3.0)).collect());
            extra.push(None);
        }
    }
    let qm = Matrix::from_rows(&qs, 24).unwrap();
    for metric in [&Cosine as &dyn SimilarityMetric, &Euclidean] {
        for k in [1, 10, 50] {
            let batch = store.search_batch(&qm, k, &excl, &extra, metric).unwrap();
            for (i, q) in qs.iter().enumerate() {
                let mut ex = excl.clone();
                if let Some(r) = extra[i] {
                    ex.insert(r);
                }
                assert_eq!(
                    batch[i],
                    store.search_topk(q, k, &ex, metric).unwrap(),
                    "query {i}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cosine_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let rows = random_rows(60, 6, seed);
        let store = store_of(&rows, ids(60));
        let q: Vec<f64> = random_rows(1, 6, seed + 1)[0].iter().map(|&v| v as f64).collect();
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let ex = ExclusionSet::none(60);
        let a = store.search_topk(&q, 8, &ex, &Cosine).unwrap();
        let b = store.search_topk(&qs, 8, &ex, &Cosine).unwrap();
        prop_assert_eq!(hit_ids(&a), hit_ids(&b));
    }

    #[test]
    fn results_are_monotone_and_nested(seed in 0u64..1000, k in 1usize..20) {
        let rows = random_rows(40, 5, seed);
        let store = store_of(&rows, ids(40));
        let q: Vec<f64> = random_rows(1, 5, seed + 7)[0].iter().map(|&v| v as f64).collect();
        let ex = ExclusionSet::none(40);
        for metric in [&Cosine as &dyn SimilarityMetric, &Euclidean] {
            let small = store.search_topk(&q, k, &ex, metric).unwrap();
            let big = store.search_topk(&q, k + 5, &ex, metric).unwrap();
            prop_assert_eq!(small.len(), k);
            prop_assert_eq!(&big[..k], &small[..]);
            for w in big.windows(2) {
                if metric.higher_is_better() {
                    prop_assert!(w[0].score >= w[1].score);
                } else {
                    prop_assert!(w[0].score <= w[1].score);
                }
            }
        }
    }
}

fn tiny_aligned() -> AlignedStore {
    let names: Vec<String> = ["u1", "u2", "x3"].map(String::from).to_vec();
    let index = Arc::new(IdIndex::new(names).unwrap());
    let hidden = Modality::ALL.map(|m| {
        let base = m.index() as f32;
        let data = vec![1.0, base, 0.5, 0.0, 1.0, base, base + 1.0, 0.0, 1.0];
        ModalityStore::new(m, 3, index.clone(), data).unwrap()
    });
    let labels = vec![
        Some(EmotionLabel::from_code(2).unwrap()),
        None,
        Some(EmotionLabel::from_code(5).unwrap()),
    ];
    AlignedStore::new(index, labels, hidden, ScaleTier::Small, "ck".into()).unwrap()
}

#[test]
fn cross_lookup_returns_other_modality() {
    let s = tiny_aligned();
    let got = s.cross_lookup(&["x3", "u1"], Modality::Text).unwrap();
    assert_eq!(got[0].as_ref(), &[3.0, 0.0, 1.0]);
    assert_eq!(got[1].as_ref(), &[1.0, 2.0, 0.5]);
    assert!(matches!(
        s.cross_lookup(&["nope"], Modality::Audio),
        Err(RamerError::UnknownId(_))
    ));
}

#[test]
fn store_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = tiny_aligned();
    let raw = Modality::ALL.map(|m| {
        ModalityStore::new(
            m,
            2,
            Arc::new(s.index().clone()),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap()
    });
    s.set_raw(Arc::new(raw)).unwrap();
    save_store(dir.path(), &s).unwrap();
    let back = load_store(dir.path()).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.hash(), s.hash());
    assert!(back.has_raw());
    for name in [
        "audio.rfv",
        "video.rfv",
        "text.rfv",
        "raw_audio.rfv",
        "store.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn tampered_store_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_store(dir.path(), &tiny_aligned()).unwrap();
    let path = dir.path().join("video.rfv");
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'Z';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_store(dir.path()),
        Err(RamerError::StaleArtifact { .. })
    ));

    // With the manifest hash updated, the format checks take over.
    let manifest_path = dir.path().join("store.json");
    let patch = |bytes: &[u8]| {
        let mut m: serde_json::Value =
            serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
        m["files"][1]["sha256"] = sha256_hex(bytes).into();
        fs::write(&manifest_path, serde_json::to_vec(&m).unwrap()).unwrap();
    };
    patch(&bad);
    assert!(matches!(
        load_store(dir.path()),
        Err(RamerError::BadMagic { .. })
    ));

    let mut flipped = good.clone();
    let mid = good.len() - 8;
    flipped[mid] ^= 0x01;
    fs::write(&path, &flipped).unwrap();
    patch(&flipped);
    assert!(matches!(
        load_store(dir.path()),
        Err(RamerError::CrcMismatch { .. })
    ));
}

#[test]
fn build_store_normalizes_and_orders_by_id() {
    let cfg = SyntheticConfig {
        n_labeled: 40,
        n_unlabeled: 20,
        dims: crate::dataset::ModalityDims::new(6, 5, 7),
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ck = Checkpoint {
        encoders: [6, 5, 7].map(|d| EncoderParams::init(EncoderShape::new(d, 4), &mut rng)),
        meta: CheckpointMeta {
            epoch: 1,
            val_wa: 0.0,
            seed: 0,
            config_hash: String::new(),
        },
    };
    let members: BTreeSet<String> = corpus
        .samples()
        .iter()
        .step_by(2)
        .map(|s| s.id.clone())
        .collect();
    let store = build_store(&corpus, &ck, ScaleTier::Turbo, &members).unwrap();
    assert_eq!(store.len(), members.len());
    assert!(store.index().ids().windows(2).all(|w| w[0] < w[1]));
    assert_eq!(store.checkpoint_hash, ck.hash());
    for m in Modality::ALL {
        let s = store.store(m);
        assert_eq!(s.dim(), 4);
        for r in 0..s.len() {
            let n = s
                .record(r)
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            let sample = corpus.get(store.index().id(r)).unwrap();
            assert_eq!(store.label(r), sample.label);
        }
    }
    let raw = build_raw_stores(&corpus, &members).unwrap();
    let id = store.index().id(3);
    assert_eq!(
        raw[2].get(id).unwrap(),
        corpus.get(id).unwrap().embedding(Modality::Text).unwrap()
    );
}
