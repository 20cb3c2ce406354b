use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Modality;
use crate::error::{RamerError, Result};
use crate::vecstore::AlignedStore;

/// Writes `n` seeded records per modality as CSV:
/// `modality,id,label,h0,...`. The same ids are used for every modality,
/// in ascending row order.
pub fn export_hidden_csv(store: &AlignedStore, n: usize, seed: u64, path: &Path) -> Result<()> {
    if n > store.len() {
        return Err(RamerError::InvalidConfig(format!(
            "cannot export {n} records from a store of {}",
            store.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, store.len(), n).into_vec();
    rows.sort_unstable();
    let dim = store.store(Modality::Audio).dim();
    let mut out = String::from("modality,id,label");
    for i in 0..dim {
        let _ = write!(out, ",h{i}");
    }
    out.push('\n');
    for m in Modality::ALL {
        let s = store.store(m);
        for &r in &rows {
            let label = store.label(r).map(|l| l.name()).unwrap_or("");
            let _ = write!(out, "{},{},{label}", m.name(), store.index().id(r));
            for v in s.record(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}
