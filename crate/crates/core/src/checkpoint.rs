//! Checkpoints: a safetensors weights file plus a JSON sidecar.

use std::path::{Path, PathBuf};

use cataract_nn::{Float, ParamStore};
use serde::{Deserialize, Serialize};

use crate::classifier::{Backbone, ClassifierConfig, MultitaskClassifier};
use crate::error::{Error, Result};
use crate::harness::{write_json, TrainConfig, Trained};
use crate::pyramid::{PyramidConfig, PyramidNet};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Segmentation(PyramidConfig),
    Classification(ClassifierConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Epoch whose weights are stored.
    pub epoch: usize,
    /// Mean train loss of that epoch.
    pub train_loss: Option<f64>,
    pub loss_history: Vec<f64>,
    pub metric_history: Vec<f64>,
    pub rng_seed: u64,
    pub rng_state_digest: String,
    /// Joint-loss weight, for classifiers.
    pub lambda: Option<f64>,
    pub backbone: Option<Backbone>,
    /// Precision of the stored weights.
    pub weights_dtype: String,
    /// Digest of the stored weights; checked when loading at the stored
    /// precision.
    pub weights_digest: String,
}

impl CheckpointMeta {
    pub fn kind(&self) -> ModelKind {
        match self.model {
            ModelConfig::Segmentation(_) => ModelKind::Segmentation,
            ModelConfig::Classification(_) => ModelKind::Classification,
        }
    }

    fn untrained<T: Float>(model: ModelConfig, params: &ParamStore<T>, seed: u64) -> Self {
        let backbone = match &model {
            ModelConfig::Classification(c) => Some(c.backbone),
            ModelConfig::Segmentation(_) => None,
        };
        Self {
            model,
            train: None,
            epoch: 0,
            train_loss: None,
            loss_history: Vec::new(),
            metric_history: Vec::new(),
            rng_seed: seed,
            rng_state_digest: String::new(),
            lambda: None,
            backbone,
            weights_dtype: dtype_name::<T>(),
            weights_digest: format!("{:016x}", params.digest()),
        }
    }

    fn trained<T: Float, M>(model: ModelConfig, params: &ParamStore<T>, run: &Trained<M>, cfg: &TrainConfig) -> Self {
        let best = run.history.best();
        let lambda = matches!(model, ModelConfig::Classification(_)).then_some(cfg.lambda);
        Self {
            train: Some(cfg.clone()),
            epoch: best.epoch,
            train_loss: Some(best.train_loss),
            loss_history: run.history.loss_history(),
            metric_history: run.history.metric_history(),
            rng_state_digest: run.rng_state_digest.clone(),
            lambda,
            ..Self::untrained(model, params, cfg.seed)
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }
}

fn write<T: Float>(dir: &Path, params: &ParamStore<T>, meta: &CheckpointMeta) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = dir.join(WEIGHTS_FILE);
    cataract_nn::io::save(params, &weights)?;
    write_json(&dir.join(META_FILE), meta)?;
    Ok(dir.to_path_buf())
}

fn fill<T: Float>(dir: &Path, params: &mut ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    cataract_nn::io::load_into(params, &bytes)
        .map_err(|e| Error::Checkpoint { path: path.clone(), reason: format!("weights do not fit the model: {e}") })?;
    if dtype_name::<T>() == meta.weights_dtype && format!("{:016x}", params.digest()) != meta.weights_digest {
        return Err(Error::Checkpoint { path, reason: "weights digest does not match the sidecar".into() });
    }
    Ok(())
}

fn dtype_name<T: Float>() -> String {
    format!("{:?}", T::DTYPE).to_lowercase()
}

pub fn save_segmentation<T: Float>(dir: &Path, run: &Trained<PyramidNet<T>>, cfg: &TrainConfig) -> Result<PathBuf> {
    let m = &run.model;
    write(dir, m.params(), &CheckpointMeta::trained(ModelConfig::Segmentation(m.config().clone()), m.params(), run, cfg))
}

/// Saves a model that has not been through [`crate::harness`] training.
pub fn save_segmentation_model<T: Float>(dir: &Path, model: &PyramidNet<T>, seed: u64) -> Result<PathBuf> {
    let meta = CheckpointMeta::untrained(ModelConfig::Segmentation(model.config().clone()), model.params(), seed);
    write(dir, model.params(), &meta)
}

pub fn save_classifier<T: Float>(dir: &Path, run: &Trained<MultitaskClassifier<T>>, cfg: &TrainConfig) -> Result<PathBuf> {
    let m = &run.model;
    write(dir, m.params(), &CheckpointMeta::trained(ModelConfig::Classification(m.config().clone()), m.params(), run, cfg))
}

pub fn save_classifier_model<T: Float>(dir: &Path, model: &MultitaskClassifier<T>, seed: u64) -> Result<PathBuf> {
    let meta = CheckpointMeta::untrained(ModelConfig::Classification(model.config().clone()), model.params(), seed);
    write(dir, model.params(), &meta)
}

fn wrong_kind(dir: &Path, want: &str, meta: &CheckpointMeta) -> Error {
    Error::Checkpoint { path: dir.into(), reason: format!("expected a {want} checkpoint, found {:?}", meta.kind()) }
}

pub fn load_segmentation<T: Float>(dir: &Path) -> Result<(PyramidNet<T>, CheckpointMeta)> {
    let meta = CheckpointMeta::read(dir)?;
    let ModelConfig::Segmentation(cfg) = &meta.model else { return Err(wrong_kind(dir, "segmentation", &meta)) };
    let mut model = PyramidNet::new(cfg.clone(), meta.rng_seed)?;
    fill(dir, model.params_mut(), &meta)?;
    Ok((model, meta))
}

pub fn load_classifier<T: Float>(dir: &Path) -> Result<(MultitaskClassifier<T>, CheckpointMeta)> {
    let meta = CheckpointMeta::read(dir)?;
    let ModelConfig::Classification(cfg) = &meta.model else { return Err(wrong_kind(dir, "classification", &meta)) };
    // Stored weights supersede any pretrained backbone file.
    let cfg = ClassifierConfig { pretrained_weights_path: None, ..cfg.clone() };
    let mut model = MultitaskClassifier::new(cfg, meta.rng_seed)?;
    fill(dir, model.params_mut(), &meta)?;
    Ok((model, meta))
}
