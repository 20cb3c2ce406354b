//! Accuracy metrics, result grids, reports and the cross-validation runner.

mod cv;
mod export;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::error::{RamerError, Result};
use crate::pipeline::MissingCondition;

pub use cv::{
    cross_validate, default_ablation_specs, run_ablations, AblationReport, AblationSpec,
    EvalConfig, RunLog,
};
pub use export::export_hidden_csv;
pub use report::{emit_report, parse_csv_report, render_csv, render_markdown, ReportFormat};

/// Percentage of positions where `preds` equals `truth`; 0 for empty input.
pub fn accuracy_pct(preds: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(
        preds.len(),
        truth.len(),
        "prediction and truth lengths differ"
    );
    if truth.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * correct as f64 / truth.len() as f64
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Recall per class; `None` for classes without support.
    pub fn recalls(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| {
            let n = self.support(c);
            (n > 0).then(|| self.counts[c][c] as f64 / n as f64)
        })
    }
}

pub fn confusion(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(RamerError::DimensionMismatch {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        for v in [p, t] {
            if v >= NUM_CLASSES {
                return Err(RamerError::TargetOutOfRange {
                    target: v,
                    classes: NUM_CLASSES,
                });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Overall accuracy in percent.
pub fn weighted_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(RamerError::Empty("confusion matrix"));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

/// Mean recall over classes with non-zero support, in percent.
pub fn unweighted_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(RamerError::Empty("confusion matrix"));
    }
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub wa: f64,
    pub ua: f64,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            wa: weighted_accuracy(cm)?,
            ua: unweighted_accuracy(cm)?,
        })
    }
}

/// Mean and sample standard deviation of WA and UA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub wa_mean: f64,
    pub wa_std: f64,
    pub ua_mean: f64,
    pub ua_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    pub fn of(metrics: &[Metrics]) -> Option<Self> {
        if metrics.is_empty() {
            return None;
        }
        let (wa_mean, wa_std) = mean_std(&metrics.iter().map(|m| m.wa).collect::<Vec<_>>());
        let (ua_mean, ua_std) = mean_std(&metrics.iter().map(|m| m.ua).collect::<Vec<_>>());
        Some(Self {
            runs: metrics.len(),
            wa_mean,
            wa_std,
            ua_mean,
            ua_std,
        })
    }
}

/// Per-condition metrics of one configuration over all runs. Runs are
/// stored in (repeat, fold) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunGrid {
    pub spec: String,
    pub runs: BTreeMap<MissingCondition, Vec<Metrics>>,
}

impl RunGrid {
    pub fn new(spec: impl Into<String>) -> Self {
        Self {
            spec: spec.into(),
            runs: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, condition: MissingCondition, metrics: Metrics) {
        self.runs.entry(condition).or_default().push(metrics);
    }

    pub fn cell(&self, condition: MissingCondition) -> Option<Summary> {
        self.runs.get(&condition).and_then(|m| Summary::of(m))
    }

    /// Number of runs per condition (the maximum over conditions).
    pub fn run_count(&self) -> usize {
        self.runs.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Mean over the conditions present. The spread is the standard
    /// deviation of per-run averages across conditions.
    pub fn avg(&self) -> Option<Summary> {
        let n = self.run_count();
        if n == 0 || self.runs.values().any(|v| v.len() != n) {
            return None;
        }
        let per_run: Vec<Metrics> = (0..n)
            .map(|i| {
                let k = self.runs.len() as f64;
                Metrics {
                    wa: self.runs.values().map(|v| v[i].wa).sum::<f64>() / k,
                    ua: self.runs.values().map(|v| v[i].ua).sum::<f64>() / k,
                }
            })
            .collect();
        let mut s = Summary::of(&per_run)?;
        let cells: Vec<Summary> = self.runs.keys().filter_map(|c| self.cell(*c)).collect();
        s.wa_mean = cells.iter().map(|c| c.wa_mean).sum::<f64>() / cells.len() as f64;
        s.ua_mean = cells.iter().map(|c| c.ua_mean).sum::<f64>() / cells.len() as f64;
        Some(s)
    }

    /// Mean WA over `conditions` (skipping absent ones).
    pub fn mean_wa(&self, conditions: &[MissingCondition]) -> Option<f64> {
        let v: Vec<f64> = conditions
            .iter()
            .filter_map(|c| self.cell(*c))
            .map(|s| s.wa_mean)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests;
