//! Name-keyed registries of interchangeable strategies.
//!
//! Similarity metrics ([`crate::vecstore::SimilarityMetric`]) and missing-slot
//! fillers ([`crate::pipeline::SlotFiller`]) are trait objects registered under
//! the names used in configs and on the command line.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::error::{RamerError, Result};
use crate::pipeline::{FusedRetrieval, KeepMissAverage, SlotFiller, ZeroFill};
use crate::vecstore::{Cosine, Euclidean, SimilarityMetric};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| RamerError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

fn build_metrics() -> Registry<dyn SimilarityMetric> {
    let mut r: Registry<dyn SimilarityMetric> = Registry::new("metric");
    for m in [
        Arc::new(Cosine) as Arc<dyn SimilarityMetric>,
        Arc::new(Euclidean),
    ] {
        r.register(m.name(), m);
    }
    r
}

fn build_fillers() -> Registry<dyn SlotFiller> {
    let mut r: Registry<dyn SlotFiller> = Registry::new("slot filler");
    for f in [
        Arc::new(FusedRetrieval) as Arc<dyn SlotFiller>,
        Arc::new(ZeroFill),
        Arc::new(KeepMissAverage),
    ] {
        r.register(f.name(), f);
    }
    r
}

/// Built-in similarity metrics: `cosine`, `euclidean`.
pub fn metrics() -> &'static Registry<dyn SimilarityMetric> {
    static METRICS: OnceLock<Registry<dyn SimilarityMetric>> = OnceLock::new();
    METRICS.get_or_init(build_metrics)
}

/// Built-in slot fillers: `retrieval`, `zero`, `keep-miss-avg`.
pub fn fillers() -> &'static Registry<dyn SlotFiller> {
    static FILLERS: OnceLock<Registry<dyn SlotFiller>> = OnceLock::new();
    FILLERS.get_or_init(build_fillers)
}
