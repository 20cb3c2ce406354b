//! Repeated stratified cross-validation over ablation specs.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{confusion, ConfusionMatrix, Metrics, RunGrid};
use crate::bytes::derive_seed;
use crate::dataset::{
    fold_split, split_corpus, stratified_folds, tier_members, Corpus, ScaleTier, Split,
};
use crate::encoder::{pretrain_full_modality, TrainConfig};
use crate::error::{RamerError, Result};
use crate::pipeline::{
    predict_batch, train_missing, CompletionConfig, DbSource, LeakAudit, MissingCondition,
    RetrievalStats,
};
use crate::vecstore::{build_raw_stores, build_store, ModalityStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Stratified folds per repeat; 1 means a single 8:1:1 split.
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub conditions: Vec<MissingCondition>,
    pub train: TrainConfig,
    /// Upper bound on concurrently executing runs.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 3,
            seed: 0,
            conditions: MissingCondition::GRID.to_vec(),
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 || self.repeats == 0 {
            return Err(RamerError::InvalidConfig(
                "folds and repeats must be positive".into(),
            ));
        }
        if self.conditions.is_empty() {
            return Err(RamerError::InvalidConfig(
                "no conditions to evaluate".into(),
            ));
        }
        if let Some(c) = self.conditions.iter().find(|c| !c.is_grid()) {
            return Err(RamerError::InvalidConfig(format!(
                "condition {c} is not a missing-modality condition"
            )));
        }
        if self.jobs == 0 {
            return Err(RamerError::InvalidConfig("jobs must be positive".into()));
        }
        self.train.validate()
    }
}

/// One column group of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub tier: ScaleTier,
    pub completion: CompletionConfig,
}

impl AblationSpec {
    pub fn new(name: impl Into<String>, tier: ScaleTier, completion: CompletionConfig) -> Self {
        Self {
            name: name.into(),
            tier,
            completion,
        }
    }
}

/// The ablation list: no retrieval, raw-embedding database, euclidean
/// retrieval (on hidden and raw databases), and tier x K cells. `full`
/// widens the grid to all four tiers and K up to 15.
pub fn default_ablation_specs(full: bool) -> Vec<AblationSpec> {
    let base = CompletionConfig::default();
    let with = |f: &dyn Fn(&mut CompletionConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut specs = vec![
        AblationSpec::new(
            "w/o retrieval",
            ScaleTier::Turbo,
            with(&|c| c.filler = "zero".into()),
        ),
        AblationSpec::new(
            "raw source",
            ScaleTier::Turbo,
            with(&|c| c.db_source = DbSource::Raw),
        ),
        AblationSpec::new(
            "euclidean",
            ScaleTier::Turbo,
            with(&|c| c.metric = "euclidean".into()),
        ),
        AblationSpec::new(
            "raw euclidean",
            ScaleTier::Turbo,
            with(&|c| {
                c.metric = "euclidean".into();
                c.db_source = DbSource::Raw;
            }),
        ),
    ];
    let (tiers, ks): (&[ScaleTier], &[usize]) = if full {
        (&ScaleTier::ALL, &[1, 5, 10, 15])
    } else {
        (&[ScaleTier::Small, ScaleTier::Turbo], &[1, 5, 10])
    };
    for &tier in tiers {
        for &k in ks {
            specs.push(AblationSpec::new(
                format!("{tier}_top{k}"),
                tier,
                with(&|c| c.k = k),
            ));
        }
    }
    specs
}

/// JSON record of one (spec, repeat, fold, condition) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub spec: String,
    pub repeat: usize,
    pub fold: usize,
    pub condition: MissingCondition,
    pub seed: u64,
    pub train_config_hash: String,
    pub checkpoint_hash: String,
    pub model_hash: String,
    pub pretrain_epoch: u32,
    pub pretrain_val_wa: f64,
    pub best_epoch: u32,
    pub val_wa: f64,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub retrieval_queries: usize,
    pub degenerate_fusions: usize,
    pub leak_checked: usize,
    pub leaks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    pub grids: Vec<RunGrid>,
    pub logs: Vec<RunLog>,
    pub audit: LeakAudit,
    pub stats: RetrievalStats,
}

#[derive(Debug, Clone, Copy)]
struct RunPlan {
    repeat: usize,
    fold: usize,
    seed: u64,
}

fn plans(cfg: &EvalConfig) -> Vec<RunPlan> {
    let mut out = Vec::new();
    for repeat in 0..cfg.repeats {
        for fold in 0..cfg.folds {
            out.push(RunPlan {
                repeat,
                fold,
                seed: derive_seed(cfg.seed, &[11, repeat as u64, fold as u64]),
            });
        }
    }
    out
}

fn run_corpus(corpus: &Corpus, cfg: &EvalConfig, plan: RunPlan) -> Result<Corpus> {
    let split_seed = derive_seed(cfg.seed, &[10, plan.repeat as u64]);
    if cfg.folds == 1 {
        split_corpus(corpus, split_seed)
    } else {
        let folds = stratified_folds(corpus, cfg.folds, split_seed)?;
        fold_split(corpus, &folds, plan.fold)
    }
}

struct Shared {
    members: BTreeMap<ScaleTier, BTreeSet<String>>,
    raw: BTreeMap<ScaleTier, Arc<[ModalityStore; 3]>>,
}

fn run_one(
    corpus: &Corpus,
    specs: &[AblationSpec],
    cfg: &EvalConfig,
    shared: &Shared,
    plan: RunPlan,
) -> Result<(Vec<RunLog>, LeakAudit, RetrievalStats)> {
    let run = run_corpus(corpus, cfg, plan)?;
    let train_cfg = TrainConfig {
        seed: plan.seed,
        ..cfg.train.clone()
    };
    log::info!("run repeat {} fold {}: pretraining", plan.repeat, plan.fold);
    let pretrained = pretrain_full_modality(&run, &train_cfg)?;
    let ckpt = &pretrained.checkpoint;
    let checkpoint_hash = ckpt.hash();
    let mut stores = BTreeMap::new();
    for spec in specs {
        if let Entry::Vacant(slot) = stores.entry(spec.tier) {
            let mut store = build_store(&run, ckpt, spec.tier, &shared.members[&spec.tier])?;
            if let Some(raw) = shared.raw.get(&spec.tier) {
                store.set_raw(raw.clone())?;
            }
            slot.insert(store);
        }
    }
    let test: Vec<_> = run
        .samples()
        .iter()
        .filter(|s| s.split == Some(Split::Test))
        .collect();
    let truth: Vec<usize> = test
        .iter()
        .map(|s| s.label.expect("labeled").code())
        .collect();
    let barred: std::collections::HashSet<String> = run
        .samples()
        .iter()
        .filter(|s| matches!(s.split, Some(Split::Val | Split::Test)))
        .map(|s| s.id.clone())
        .collect();
    let mut logs = Vec::new();
    let mut audit = LeakAudit::default();
    let mut stats = RetrievalStats::default();
    for spec in specs {
        let store = &stores[&spec.tier];
        for &condition in &cfg.conditions {
            log::info!(
                "run repeat {} fold {}: {} / {condition}",
                plan.repeat,
                plan.fold,
                spec.name
            );
            let outcome =
                train_missing(&run, condition, store, ckpt, &spec.completion, &train_cfg)?;
            let mut run_stats = outcome.stats;
            let mut run_audit = outcome.audit.clone();
            let preds = predict_batch(
                &outcome.model,
                &test,
                store,
                barred.clone(),
                &mut run_stats,
                &mut run_audit,
            )?;
            let codes: Vec<usize> = preds.iter().map(|p| p.label.code()).collect();
            let cm = confusion(&codes, &truth)?;
            logs.push(RunLog {
                spec: spec.name.clone(),
                repeat: plan.repeat,
                fold: plan.fold,
                condition,
                seed: plan.seed,
                train_config_hash: train_cfg.hash(),
                checkpoint_hash: checkpoint_hash.clone(),
                model_hash: outcome.model.hash(),
                pretrain_epoch: ckpt.meta.epoch,
                pretrain_val_wa: ckpt.meta.val_wa,
                best_epoch: outcome.model.epoch,
                val_wa: outcome.model.val_wa,
                metrics: Metrics::from_confusion(&cm)?,
                confusion: cm,
                retrieval_queries: run_stats.queries,
                degenerate_fusions: run_stats.degenerate_fusions,
                leak_checked: run_audit.checked,
                leaks: run_audit.leaks,
            });
            audit.merge(&run_audit);
            stats.queries += run_stats.queries;
            stats.degenerate_fusions += run_stats.degenerate_fusions;
        }
    }
    Ok((logs, audit, stats))
}

/// Runs every spec under every condition of `cfg` for each (repeat, fold).
/// Stage-1 pretraining runs once per (repeat, fold) on its train split and
/// is shared by all specs; stores are built per tier from that checkpoint.
pub fn run_ablations(
    corpus: &Corpus,
    specs: &[AblationSpec],
    cfg: &EvalConfig,
) -> Result<AblationReport> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(RamerError::InvalidConfig("no ablation specs".into()));
    }
    let mut names = BTreeSet::new();
    for s in specs {
        s.completion.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(RamerError::InvalidConfig(format!(
                "duplicate spec name {:?}",
                s.name
            )));
        }
    }
    let tier_seed = derive_seed(cfg.seed, &[12]);
    let mut members = BTreeMap::new();
    let mut raw = BTreeMap::new();
    for spec in specs {
        members
            .entry(spec.tier)
            .or_insert_with(|| tier_members(corpus, spec.tier, tier_seed));
        if spec.completion.db_source == DbSource::Raw && !raw.contains_key(&spec.tier) {
            raw.insert(
                spec.tier,
                Arc::new(build_raw_stores(corpus, &members[&spec.tier])?),
            );
        }
    }
    let shared = Shared { members, raw };
    let plans = plans(cfg);
    let results: Vec<Result<(Vec<RunLog>, LeakAudit, RetrievalStats)>> = if cfg.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| RamerError::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            plans
                .par_iter()
                .map(|p| run_one(corpus, specs, cfg, &shared, *p))
                .collect()
        })
    } else {
        plans
            .iter()
            .map(|p| run_one(corpus, specs, cfg, &shared, *p))
            .collect()
    };
    let mut report = AblationReport {
        grids: specs.iter().map(|s| RunGrid::new(s.name.clone())).collect(),
        ..Default::default()
    };
    for r in results {
        let (logs, audit, stats) = r?;
        report.audit.merge(&audit);
        report.stats.queries += stats.queries;
        report.stats.degenerate_fusions += stats.degenerate_fusions;
        for log in logs {
            let i = specs
                .iter()
                .position(|s| s.name == log.spec)
                .expect("known spec");
            report.grids[i].push(log.condition, log.metrics);
            report.logs.push(log);
        }
    }
    Ok(report)
}

/// Cross-validated grid for a single configuration.
pub fn cross_validate(
    corpus: &Corpus,
    spec: &AblationSpec,
    cfg: &EvalConfig,
) -> Result<AblationReport> {
    run_ablations(corpus, std::slice::from_ref(spec), cfg)
}
