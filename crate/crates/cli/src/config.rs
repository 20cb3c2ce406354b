//! The run configuration file and the hash chain derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ramer_core::bytes::{derive_seed, sha256_hex};
use ramer_core::dataset::{ScaleTier, SyntheticConfig};
use ramer_core::encoder::TrainConfig;
use ramer_core::eval::EvalConfig;
use ramer_core::pipeline::{CompletionConfig, MissingCondition};
use ramer_core::RamerError;

use crate::CliError;

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated by `gen-data` into `<output_dir>/data`.
    Synthetic(SyntheticConfig),
    /// A JSON-lines manifest plus one RFV1 feature file per modality.
    Files {
        manifest: PathBuf,
        audio: PathBuf,
        video: PathBuf,
        text: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

/// Everything a run needs. Seeds inside the sections are replaced by seeds
/// derived from `seed` (see [`RunConfig::effective`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub completion: CompletionConfig,
    pub tier: ScaleTier,
    pub conditions: Vec<MissingCondition>,
    /// Stratified folds per repeat for `eval` and `ablate`; 1 means the
    /// corpus split is used once.
    pub folds: usize,
    pub repeats: usize,
    pub jobs: usize,
    /// Widen the ablation grid to every tier and K up to 15.
    pub full_ablation: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            completion: CompletionConfig::default(),
            tier: ScaleTier::Turbo,
            conditions: MissingCondition::GRID.to_vec(),
            folds: eval.folds,
            repeats: eval.repeats,
            jobs: 1,
            full_ablation: false,
            output_dir: PathBuf::from("ramer-out"),
            seed: 0,
        }
    }
}

mod stream {
    pub const SYNTHETIC: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const TIER: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const EXPORT: u64 = 6;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The config with derived sub-seeds filled in. All hashes are taken
    /// over this form.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        if let DatasetSource::Synthetic(s) = &mut out.dataset {
            s.seed = derive_seed(self.seed, &[stream::SYNTHETIC]);
        }
        out.train.seed = derive_seed(self.seed, &[stream::TRAIN]);
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: RamerError| CliError::Config(e.to_string());
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate().map_err(config)?;
        }
        self.train.validate().map_err(config)?;
        self.completion.validate().map_err(config)?;
        self.eval_config().validate().map_err(config)?;
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::SPLIT])
    }

    pub fn tier_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::TIER])
    }

    pub fn export_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::EXPORT])
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            folds: self.folds,
            repeats: self.repeats,
            seed: derive_seed(self.seed, &[stream::EVAL]),
            conditions: self.conditions.clone(),
            train: self.effective().train,
            jobs: self.jobs,
        }
    }

    /// Identity of the corpus: dataset section, master seed and, for file
    /// sources, the file contents.
    pub fn data_hash(&self) -> Result<String, CliError> {
        let e = self.effective();
        let mut contents = Vec::new();
        if let DatasetSource::Files {
            manifest,
            audio,
            video,
            text,
        } = &e.dataset
        {
            for p in [manifest, audio, video, text] {
                let bytes = std::fs::read(p)
                    .map_err(|err| CliError::Artifact(format!("{}: {err}", p.display())))?;
                contents.push(sha256_hex(&bytes));
            }
        }
        Ok(hash_json(&(&e.dataset, e.seed, contents)))
    }

    /// Identity of the stage-1 checkpoint.
    pub fn pretrain_hash(&self, data_hash: &str) -> String {
        let e = self.effective();
        hash_json(&(data_hash, self.split_seed(), &e.train))
    }

    /// Identity of a stage-3 model given its upstream artifacts.
    pub fn model_hash(&self, condition: MissingCondition, checkpoint: &str, store: &str) -> String {
        let e = self.effective();
        hash_json(&(condition, &e.completion, &e.train, checkpoint, store))
    }

    /// Identity of an `eval` or `ablate` result. Parallelism and the
    /// output location do not change results and are left out.
    pub fn eval_hash(&self, what: &str, data_hash: &str) -> String {
        let mut e = self.effective();
        e.jobs = 1;
        e.output_dir = PathBuf::new();
        hash_json(&(what, data_hash, &e))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("pretrain").join("checkpoint.ck")
    }

    pub fn store_dir(&self) -> PathBuf {
        self.output_dir.join("db").join(self.tier.name())
    }

    pub fn model_path(&self, condition: MissingCondition) -> PathBuf {
        self.output_dir
            .join("models")
            .join(format!("{}.model", condition.code()))
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}
