//! Run directory artifacts and loading a trained run back for serving.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hear_core::data::avsd::LoadMode;
use hear_core::data::dataset::{load_dataset, Dataset};
use hear_core::decode::DecodeConfig;
use hear_core::dlm::DlmModel;
use hear_core::experiment::Splits;
use hear_core::sal::{EstimatorModel, KeywordSet};
use hear_core::session::{Clip, DialogueEngine};
use hear_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const ESTIMATOR_FILE: &str = "estimator.json";

/// What `train` records about a run so later commands can rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub data: PathBuf,
    pub variant: Variant,
    pub estimator: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub seed: u64,
    pub splits: Splits,
    pub train: TrainConfig,
}

impl RunManifest {
    pub fn load(run: &Path) -> anyhow::Result<Self> {
        let path = run.join(MANIFEST_FILE);
        let bytes = fs::read(&path).with_context(|| format!("no trained run at {} (missing {MANIFEST_FILE})", run.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_keywords(path: Option<&Path>) -> anyhow::Result<KeywordSet> {
    match path {
        Some(p) => Ok(KeywordSet::from_file(p).with_context(|| format!("reading keywords {}", p.display()))?),
        None => Ok(KeywordSet::default()),
    }
}

pub fn load_data(dir: &Path) -> anyhow::Result<Dataset> {
    load_dataset(dir, LoadMode::Strict).with_context(|| format!("loading dataset {}", dir.display()))
}

/// `best`, `last`, or a checkpoint path.
pub fn checkpoint_path(run: &Path, which: &str) -> PathBuf {
    match which {
        "best" | "last" => run.join(format!("{which}.json")),
        other => PathBuf::from(other),
    }
}

/// A trained run with its model, estimator and data loaded.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub model: DlmModel,
    pub estimator: Option<EstimatorModel>,
    pub keywords: KeywordSet,
    pub dataset: Dataset,
}

pub fn load_run(run: &Path, checkpoint: &str, data_override: Option<&Path>) -> anyhow::Result<LoadedRun> {
    let manifest = RunManifest::load(run)?;
    let ckpt = checkpoint_path(run, checkpoint);
    let model = DlmModel::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let estimator = match &manifest.estimator {
        Some(p) => Some(EstimatorModel::load(p).with_context(|| format!("loading estimator {}", p.display()))?),
        None => None,
    };
    let keywords = load_keywords(manifest.keywords.as_deref())?;
    let dataset = load_data(data_override.unwrap_or(&manifest.data))?;
    Ok(LoadedRun { manifest, model, estimator, keywords, dataset })
}

impl LoadedRun {
    /// Session engine configured the way the run was trained.
    pub fn into_engine(self, section: &str, decode: DecodeConfig, max_question_tokens: usize) -> anyhow::Result<DialogueEngine> {
        decode.validate().map_err(|e| crate::config::ConfigError::from_core(section, e))?;
        if max_question_tokens == 0 {
            bail!(crate::config::ConfigError { path: format!("{section}.max_question_tokens"), reason: "must be at least 1".into() });
        }
        let clips: BTreeMap<String, Clip> = self
            .dataset
            .dialogues
            .iter()
            .map(|d| {
                let track = self.dataset.tracks[&d.clip_id].as_ref().clone();
                (d.clip_id.clone(), Clip { caption: d.caption.clone(), track })
            })
            .collect();
        let mut engine = DialogueEngine::new(self.model, self.estimator, clips);
        engine.keywords = self.keywords;
        engine.sal_mode = self.manifest.train.sal_mode;
        engine.history_window = self.manifest.train.history_window;
        engine.decode = decode;
        engine.max_question_tokens = max_question_tokens;
        Ok(engine)
    }
}
