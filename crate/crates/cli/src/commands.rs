use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ramer_core::dataset::{
    generate_synthetic, load_features, load_manifest, split_corpus, tier_members, write_features,
    write_manifest, Corpus, EmotionLabel, Modality, Split,
};
use ramer_core::encoder::{load_checkpoint, pretrain_full_modality, save_checkpoint, Checkpoint};
use ramer_core::eval::{
    confusion, cross_validate, default_ablation_specs, export_hidden_csv, render_csv,
    render_markdown, run_ablations, AblationReport, AblationSpec, Metrics, ReportFormat, RunGrid,
};
use ramer_core::pipeline::{
    load_model, predict_batch, save_model, train_missing, DbSource, LeakAudit, RetrievalStats,
};
use ramer_core::vecstore::{build_raw_stores, build_store, load_store, save_store, AlignedStore};
use ramer_core::RamerError;

use crate::config::{DatasetSource, RunConfig};
use crate::{CliError, Common, ExportArgs, ReportArgs};

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.tier {
        cfg.tier = t;
    }
    if let Some(cond) = c.condition {
        cfg.conditions = vec![cond];
    }
    if let Some(k) = c.k {
        cfg.completion.k = k;
    }
    if let Some(m) = &c.metric {
        cfg.completion.metric = m.clone();
    }
    if let Some(d) = c.db_source {
        cfg.completion.db_source = d;
    }
    if c.freeze_encoders {
        cfg.completion.freeze_encoders = true;
    }
    if c.keep_miss {
        cfg.completion.filler = "keep-miss-avg".into();
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &c.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn stale(what: impl Into<String>, expected: &str, found: &str) -> CliError {
    RamerError::StaleArtifact {
        what: what.into(),
        expected: expected.into(),
        found: found.into(),
    }
    .into()
}

/// Decides what to do with an existing artifact: `Ok(true)` means it is
/// current and the stage can be skipped.
fn check_existing(
    what: &Path,
    found: Option<&str>,
    expected: &str,
    force: bool,
) -> Result<bool, CliError> {
    match found {
        None => Ok(false),
        Some(_) if force => Ok(false),
        Some(h) if h == expected => {
            println!("{} is up to date", what.display());
            Ok(true)
        }
        Some(h) => Err(CliError::Artifact(format!(
            "{} was built from a different configuration (hash {h}, expected {expected}); pass --force to overwrite",
            what.display()
        ))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct DataMeta {
    config_hash: String,
    labeled: usize,
    unlabeled: usize,
    histogram: Vec<(String, usize)>,
}

fn histogram(corpus: &Corpus) -> Vec<(String, usize)> {
    EmotionLabel::ALL
        .iter()
        .zip(corpus.label_histogram())
        .map(|(l, n)| (l.name().to_string(), n))
        .collect()
}

fn feature_file(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.rfv", m.name()))
}

pub fn gen_data(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let eff = cfg.effective();
    let DatasetSource::Synthetic(syn) = &eff.dataset else {
        return Err(CliError::Config(
            "gen-data needs a synthetic dataset section".into(),
        ));
    };
    let data_hash = cfg.data_hash()?;
    let dir = cfg.data_dir();
    let meta_path = dir.join("meta.json");
    let found = meta_path
        .exists()
        .then(|| read_json::<DataMeta>(&meta_path))
        .transpose()?
        .map(|m| m.config_hash);
    if check_existing(&dir, found.as_deref(), &data_hash, c.force)? {
        return Ok(());
    }
    let corpus = split_corpus(&generate_synthetic(syn)?, cfg.split_seed())?;
    create_dir(&dir)?;
    // the metadata goes last so that an interrupted run never looks current
    let _ = fs::remove_file(&meta_path);
    write_manifest(&corpus, &dir.join("manifest.jsonl"))?;
    for m in Modality::ALL {
        write_features(&corpus, m, &feature_file(&dir, m))?;
    }
    let meta = DataMeta {
        config_hash: data_hash,
        labeled: corpus.labeled().count(),
        unlabeled: corpus.unlabeled().count(),
        histogram: histogram(&corpus),
    };
    write_json(&meta_path, &meta)?;
    println!(
        "wrote {} labeled and {} unlabeled samples to {}",
        meta.labeled,
        meta.unlabeled,
        dir.display()
    );
    for (name, n) in &meta.histogram {
        println!("  {name:<10} {n}");
    }
    Ok(())
}

/// The corpus with splits assigned, and its identity hash.
fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, String), CliError> {
    let data_hash = cfg.data_hash()?;
    let corpus = match &cfg.dataset {
        DatasetSource::Synthetic(_) => {
            let dir = cfg.data_dir();
            let meta_path = dir.join("meta.json");
            if !meta_path.exists() {
                return Err(CliError::Artifact(format!(
                    "{} is missing; run gen-data first",
                    meta_path.display()
                )));
            }
            let meta: DataMeta = read_json(&meta_path)?;
            if meta.config_hash != data_hash {
                return Err(stale(
                    dir.display().to_string(),
                    &data_hash,
                    &meta.config_hash,
                ));
            }
            let mut corpus = load_manifest(&dir.join("manifest.jsonl"))?;
            for m in Modality::ALL {
                load_features(&mut corpus, &feature_file(&dir, m), m)?;
            }
            corpus
        }
        DatasetSource::Files {
            manifest,
            audio,
            video,
            text,
        } => {
            let mut corpus = load_manifest(manifest)?;
            for (m, p) in Modality::ALL.into_iter().zip([audio, video, text]) {
                load_features(&mut corpus, p, m)?;
            }
            if corpus.labeled().any(|s| s.split.is_none()) {
                corpus = split_corpus(&corpus, cfg.split_seed())?;
            }
            corpus
        }
    };
    Ok((corpus, data_hash))
}

pub fn pretrain(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let (corpus, data_hash) = load_corpus(&cfg)?;
    let expected = cfg.pretrain_hash(&data_hash);
    let path = cfg.checkpoint_path();
    let found = path
        .exists()
        .then(|| load_checkpoint(&path))
        .transpose()?
        .map(|ck| ck.meta.config_hash);
    if check_existing(&path, found.as_deref(), &expected, c.force)? {
        return Ok(());
    }
    let outcome = pretrain_full_modality(&corpus, &cfg.effective().train)?;
    let mut ck = outcome.checkpoint;
    ck.meta.config_hash = expected;
    create_dir(path.parent().expect("checkpoint has a parent"))?;
    write_json(&path.with_file_name("history.json"), &outcome.history)?;
    save_checkpoint(&path, &ck)?;
    println!(
        "checkpoint {} from epoch {} (validation WA {:.2})",
        path.display(),
        ck.meta.epoch,
        ck.meta.val_wa
    );
    Ok(())
}

fn load_checkpoint_checked(cfg: &RunConfig, data_hash: &str) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(CliError::Artifact(format!(
            "{} is missing; run pretrain first",
            path.display()
        )));
    }
    let ck = load_checkpoint(&path)?;
    let expected = cfg.pretrain_hash(data_hash);
    if ck.meta.config_hash != expected {
        return Err(stale(
            path.display().to_string(),
            &expected,
            &ck.meta.config_hash,
        ));
    }
    Ok(ck)
}

fn store_is_current(cfg: &RunConfig, store: &AlignedStore, ck: &Checkpoint) -> bool {
    store.tier == cfg.tier
        && store.checkpoint_hash == ck.hash()
        && (cfg.completion.db_source == DbSource::Hidden || store.has_raw())
}

pub fn build_db(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let (corpus, data_hash) = load_corpus(&cfg)?;
    let ck = load_checkpoint_checked(&cfg, &data_hash)?;
    let dir = cfg.store_dir();
    if dir.join("store.json").exists() && !c.force {
        let store = load_store(&dir)?;
        if store_is_current(&cfg, &store, &ck) {
            println!("{} is up to date", dir.display());
            return Ok(());
        }
        return Err(CliError::Artifact(format!(
            "{} was built from checkpoint {}, expected {}; pass --force to overwrite",
            dir.display(),
            store.checkpoint_hash,
            ck.hash()
        )));
    }
    let members = tier_members(&corpus, cfg.tier, cfg.tier_seed());
    let mut store = build_store(&corpus, &ck, cfg.tier, &members)?;
    if cfg.completion.db_source == DbSource::Raw {
        store.set_raw(std::sync::Arc::new(build_raw_stores(&corpus, &members)?))?;
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(runtime)?;
    }
    create_dir(&dir)?;
    save_store(&dir, &store)?;
    println!(
        "{} tier store with {} records in {}",
        cfg.tier,
        store.len(),
        dir.display()
    );
    Ok(())
}

fn load_store_checked(cfg: &RunConfig, ck: &Checkpoint) -> Result<AlignedStore, CliError> {
    let dir = cfg.store_dir();
    if !dir.join("store.json").exists() {
        return Err(CliError::Artifact(format!(
            "{} is missing; run build-db first",
            dir.display()
        )));
    }
    let store = load_store(&dir)?;
    if store.checkpoint_hash != ck.hash() {
        return Err(stale(
            dir.display().to_string(),
            &ck.hash(),
            &store.checkpoint_hash,
        ));
    }
    if cfg.completion.db_source == DbSource::Raw && !store.has_raw() {
        return Err(CliError::Artifact(format!(
            "{} has no raw-embedding tables; rerun build-db with --db-source raw",
            dir.display()
        )));
    }
    Ok(store)
}

fn held_out(corpus: &Corpus) -> HashSet<String> {
    corpus
        .samples()
        .iter()
        .filter(|s| matches!(s.split, Some(Split::Val | Split::Test)))
        .map(|s| s.id.clone())
        .collect()
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let Some(condition) = c.condition else {
        return Err(CliError::Config("train needs --condition".into()));
    };
    if !condition.is_grid() {
        return Err(CliError::Config(format!(
            "condition {condition} has no missing modality; train covers the six missing-modality conditions"
        )));
    }
    let cfg = load_config(c)?;
    let (corpus, data_hash) = load_corpus(&cfg)?;
    let ck = load_checkpoint_checked(&cfg, &data_hash)?;
    let store = load_store_checked(&cfg, &ck)?;
    let expected = cfg.model_hash(condition, &ck.hash(), &store.hash());
    let path = cfg.model_path(condition);
    let found = path
        .exists()
        .then(|| load_model(&path))
        .transpose()?
        .map(|m| m.config_hash);
    if check_existing(&path, found.as_deref(), &expected, c.force)? {
        return Ok(());
    }
    let eff = cfg.effective();
    let outcome = train_missing(&corpus, condition, &store, &ck, &eff.completion, &eff.train)?;
    let mut model = outcome.model;
    model.config_hash = expected;

    let test: Vec<_> = corpus
        .samples()
        .iter()
        .filter(|s| s.split == Some(Split::Test))
        .collect();
    let mut stats = RetrievalStats::default();
    let mut audit = LeakAudit::default();
    let preds = predict_batch(
        &model,
        &test,
        &store,
        held_out(&corpus),
        &mut stats,
        &mut audit,
    )?;
    if audit.leaks != 0 {
        return Err(runtime(format!(
            "{} retrieved ids came from held-out samples",
            audit.leaks
        )));
    }
    let codes: Vec<usize> = preds.iter().map(|p| p.label.code()).collect();
    let truth: Vec<usize> = test
        .iter()
        .map(|s| s.label.expect("labeled").code())
        .collect();
    let metrics = Metrics::from_confusion(&confusion(&codes, &truth)?)?;

    create_dir(path.parent().expect("model has a parent"))?;
    write_json(&path.with_extension("history.json"), &outcome.history)?;
    save_model(&path, &model)?;
    println!(
        "model {} from epoch {} (validation WA {:.2}); test WA {:.2} UA {:.2}",
        path.display(),
        model.epoch,
        model.val_wa,
        metrics.wa,
        metrics.ua
    );
    Ok(())
}

/// The grids of an `eval` or `ablate` run with the hash they came from.
#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    config_hash: String,
    grids: Vec<RunGrid>,
}

fn write_report_dir(
    dir: &Path,
    config_hash: String,
    report: &AblationReport,
) -> Result<(), CliError> {
    if report.audit.leaks != 0 {
        return Err(runtime(format!(
            "{} retrieved ids came from held-out samples",
            report.audit.leaks
        )));
    }
    create_dir(dir)?;
    let grids_path = dir.join("grids.json");
    let _ = fs::remove_file(&grids_path);
    let mut runs = Vec::new();
    for log in &report.logs {
        serde_json::to_writer(&mut runs, log).map_err(runtime)?;
        runs.push(b'\n');
    }
    fs::write(dir.join("runs.jsonl"), runs).map_err(runtime)?;
    fs::write(dir.join("report.md"), render_markdown(&report.grids)).map_err(runtime)?;
    fs::write(dir.join("report.csv"), render_csv(&report.grids)).map_err(runtime)?;
    write_json(
        &grids_path,
        &GridFile {
            config_hash,
            grids: report.grids.clone(),
        },
    )?;
    print!("{}", render_markdown(&report.grids));
    println!(
        "{} runs, {} retrieval queries, {} retrieved ids audited, 0 leaks",
        report.logs.len(),
        report.stats.queries,
        report.audit.checked
    );
    Ok(())
}

fn grid_file_hash(dir: &Path) -> Result<Option<String>, CliError> {
    let p = dir.join("grids.json");
    Ok(p.exists()
        .then(|| read_json::<GridFile>(&p))
        .transpose()?
        .map(|g| g.config_hash))
}

pub fn eval(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let (corpus, data_hash) = load_corpus(&cfg)?;
    let expected = cfg.eval_hash("eval", &data_hash);
    let dir = cfg.output_dir.join("eval");
    if check_existing(&dir, grid_file_hash(&dir)?.as_deref(), &expected, c.force)? {
        return Ok(());
    }
    let spec = AblationSpec::new("ramer", cfg.tier, cfg.completion.clone());
    let report = cross_validate(&corpus, &spec, &cfg.eval_config())?;
    write_report_dir(&dir, expected, &report)
}

pub fn ablate(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let (corpus, data_hash) = load_corpus(&cfg)?;
    let expected = cfg.eval_hash("ablate", &data_hash);
    let dir = cfg.output_dir.join("ablate");
    if check_existing(&dir, grid_file_hash(&dir)?.as_deref(), &expected, c.force)? {
        return Ok(());
    }
    let specs = default_ablation_specs(cfg.full_ablation);
    let report = run_ablations(&corpus, &specs, &cfg.eval_config())?;
    write_report_dir(&dir, expected, &report)
}

pub fn report(r: &ReportArgs) -> Result<(), CliError> {
    let mut grids = Vec::new();
    for p in &r.inputs {
        grids.extend(read_json::<GridFile>(p)?.grids);
    }
    let text = match r.format {
        ReportFormat::Markdown => render_markdown(&grids),
        ReportFormat::Csv => render_csv(&grids),
    };
    match &r.out {
        Some(p) => fs::write(p, text).map_err(|e| runtime(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(runtime),
    }
}

pub fn export_hidden(e: &ExportArgs) -> Result<(), CliError> {
    let cfg = load_config(&e.common)?;
    let data_hash = cfg.data_hash()?;
    let ck = load_checkpoint_checked(&cfg, &data_hash)?;
    let store = load_store_checked(&cfg, &ck)?;
    let path = e.out.clone().unwrap_or_else(|| {
        cfg.output_dir
            .join("export")
            .join(format!("hidden_{}.csv", cfg.tier))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    export_hidden_csv(&store, e.n, cfg.export_seed(), &path)?;
    println!("wrote {} records per modality to {}", e.n, path.display());
    Ok(())
}
