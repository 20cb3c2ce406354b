//! Manifest (JSON lines) and RFV1 feature-file ingestion.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Corpus, EmotionLabel, Modality, ModalityDims, Sample, Split};
use crate::error::{RamerError, Result};
use crate::vecstore::rfv;

/// One manifest line: `{"id": "...", "label": "Happy", "split": "train"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut corpus = Corpus::new(ModalityDims::default());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| RamerError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = rec
            .label
            .as_deref()
            .map(str::parse::<EmotionLabel>)
            .transpose()
            .map_err(parse_err)?;
        let split = rec
            .split
            .as_deref()
            .map(str::parse::<Split>)
            .transpose()
            .map_err(parse_err)?;
        match (label, split) {
            (None, Some(Split::Train | Split::Val | Split::Test)) => {
                return Err(parse_err(format!(
                    "unlabeled sample {:?} assigned to a labeled split",
                    rec.id
                )))
            }
            (Some(_), Some(Split::Unlabeled)) => {
                return Err(parse_err(format!(
                    "labeled sample {:?} marked unlabeled",
                    rec.id
                )))
            }
            _ => {}
        }
        let mut sample = Sample::new(rec.id, label);
        sample.split = split.or(if label.is_none() {
            Some(Split::Unlabeled)
        } else {
            None
        });
        corpus.push(sample).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(corpus)
}

pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in corpus.samples() {
        let rec = ManifestRecord {
            id: s.id.clone(),
            label: s.label.map(|l| l.name().to_string()),
            split: s.split.map(|sp| sp.name().to_string()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Fills one modality's embeddings from an RFV1 file. Returns the number of
/// rows loaded.
pub fn load_features(corpus: &mut Corpus, path: &Path, modality: Modality) -> Result<usize> {
    let table = rfv::read_rfv(path)?;
    let format_err = |msg: String| RamerError::Format {
        path: path.to_path_buf(),
        offset: 10,
        msg,
    };
    if table.modality != modality {
        return Err(format_err(format!(
            "file holds {} features, expected {}",
            table.modality, modality
        )));
    }
    let already = corpus
        .samples()
        .iter()
        .any(|s| s.embedding(modality).is_some());
    if already && corpus.dims().get(modality) != table.dim {
        return Err(RamerError::DimensionMismatch {
            expected: corpus.dims().get(modality),
            got: table.dim,
        });
    }
    let mut seen = HashSet::with_capacity(table.len());
    let mut rows = Vec::with_capacity(table.len());
    for (row, id) in table.ids.iter().enumerate() {
        let pos = corpus
            .position(id)
            .ok_or_else(|| format_err(format!("row {row}: id {id:?} is not in the manifest")))?;
        if !seen.insert(id.as_str()) {
            return Err(RamerError::DuplicateId(id.clone()));
        }
        rows.push((pos, row));
    }
    corpus.set_dim(modality, table.dim);
    let samples = corpus.samples_mut();
    for (pos, row) in rows {
        let values: Arc<[f32]> = table.row(row).into();
        samples[pos].set_embedding(modality, values);
    }
    Ok(table.len())
}

/// Writes every present embedding of `modality`, in corpus order.
pub fn write_features(corpus: &Corpus, modality: Modality, path: &Path) -> Result<usize> {
    let rows: Vec<(&str, &[f32])> = corpus
        .samples()
        .iter()
        .filter_map(|s| s.embedding(modality).map(|e| (s.id.as_str(), e)))
        .collect();
    let n = rows.len();
    rfv::write_rfv(path, modality, corpus.dims().get(modality), n, rows)?;
    Ok(n)
}
