//! Training loops for both models, per-epoch history, and the structural
//! level ablation.

use std::path::Path;
use std::time::Instant;

use cataract_nn::{Adam, AdamConfig, Float, Mode, Tape, Tensor};
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy};
use crate::classifier::{multitask_loss_with_grad, ClassifierConfig, LossWeights, MultitaskClassifier};
use crate::error::{Error, Result};
use crate::manifest::Dataset;
use crate::metrics::{cls_eval, seg_error, MultitaskEval};
use crate::postprocess::extract_roi;
use crate::pyramid::{predictions_from_logits, seg_loss_with_grad, PyramidConfig, PyramidNet};
use crate::raster::{images_to_tensor, resize_image, Mask};
use crate::sample::{ConditionLabel, EyeSample, HealthLabel};

/// Momentum used to fold batch statistics into the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Weight of the healthy/unhealthy loss; ignored for segmentation.
    pub lambda: f64,
    /// Seeds both the model initialisation and the batch order.
    pub seed: u64,
    /// Applied once to the train split before training; `None` trains on
    /// the originals only.
    pub augment: Option<AugmentPolicy>,
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            task: Task::Segmentation,
            epochs: 60,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            lambda: 0.5,
            seed: 0,
            augment: Some(AugmentPolicy::segmentation()),
        }
    }

    pub fn classification() -> Self {
        Self {
            task: Task::Classification,
            epochs: 100,
            lr: 1e-5,
            augment: Some(AugmentPolicy::classification()),
            ..Self::segmentation()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Segmentation => Self::segmentation(),
            Task::Classification => Self::classification(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Param(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_seg_error: Option<f64>,
    pub test_t1_accuracy: Option<f64>,
    pub test_t2_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub task: Task,
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    /// Train samples per epoch after augmentation.
    pub train_samples: usize,
}

impl History {
    pub fn loss_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// Test seg error for segmentation, test T2 accuracy for classification.
    pub fn metric_history(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| self.metric_of(r)).collect()
    }

    fn metric_of(&self, r: &EpochRecord) -> Option<f64> {
        match self.task {
            Task::Segmentation => r.test_seg_error,
            Task::Classification => r.test_t2_accuracy,
        }
    }

    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn best_metric(&self) -> f64 {
        self.metric_of(self.best()).expect("every epoch is evaluated")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        for r in &self.records {
            w.serialize(r).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained model with its history and the final state of the batch-order
/// generator.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub history: History,
    pub rng_state_digest: String,
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    format!("{:016x}-{:032x}", rng.get_seed().iter().fold(0u64, |h, &b| h.rotate_left(8) ^ b as u64), rng.get_word_pos())
}

fn order_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba7c4_u64)
}

fn expand(samples: &[EyeSample], policy: Option<&AugmentPolicy>) -> Result<Vec<EyeSample>> {
    match policy {
        None => Ok(samples.to_vec()),
        Some(p) => {
            let mut out = Vec::with_capacity(samples.len() * p.multiplier);
            for s in samples {
                out.extend(augment(s, p)?);
            }
            Ok(out)
        }
    }
}

/// Segmentation inputs resized to the network resolution, bilinear for
/// images and nearest-neighbour for masks.
#[derive(Clone, Debug, Default)]
pub struct SegSplit {
    pub images: Vec<GrayImage>,
    pub masks: Vec<Mask>,
}

impl SegSplit {
    pub fn prepare(samples: &[EyeSample], size: (usize, usize)) -> Result<Self> {
        let (h, w) = size;
        let mut out = Self::default();
        for s in samples {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{} has no ground-truth mask", s.sample_id)))?;
            out.images.push(resize_image(&s.image, w, h));
            out.masks.push(mask.resize_nearest(w, h));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Predicted masks at network resolution, in inference mode.
pub fn predict_seg<T: Float>(model: &PyramidNet<T>, images: &[GrayImage]) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&GrayImage> = chunk.iter().collect();
        let logits = model.logits(&images_to_tensor(&refs)?)?;
        out.extend(predictions_from_logits(&logits).into_iter().map(|p| p.mask));
    }
    Ok(out)
}

pub fn evaluate_seg<T: Float>(model: &PyramidNet<T>, split: &SegSplit) -> Result<crate::metrics::SegEvalResult> {
    seg_error(&split.masks, &predict_seg(model, &split.images)?)
}

/// Trains from `seed`-initialised weights and returns the weights of the
/// epoch with the lowest test seg error (earliest on ties).
pub fn train_segmentation<T: Float>(data: &Dataset, model_cfg: &PyramidConfig, cfg: &TrainConfig) -> Result<Trained<PyramidNet<T>>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Validation("segmentation training needs non-empty train and test splits".into()));
    }
    let train = SegSplit::prepare(&expand(&data.train, cfg.augment.as_ref())?, model_cfg.input_size)?;
    let test = SegSplit::prepare(&data.test, model_cfg.input_size)?;
    let mut model = PyramidNet::<T>::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut rng = order_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, cataract_nn::ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&GrayImage> = batch.iter().map(|&i| &train.images[i]).collect();
            let masks: Vec<Mask> = batch.iter().map(|&i| train.masks[i].clone()).collect();
            let x = images_to_tensor::<T>(&images)?;
            let (loss, grads, stats) = {
                let mut tape = Tape::new(model.params(), Mode::Train);
                let xn = tape.input(x);
                let trace = model.trace_prediction(&mut tape, xn)?;
                let (loss, seed) = seg_loss_with_grad(tape.value(trace.logits), &masks)?;
                let grads = tape.backward(vec![(trace.logits, seed)])?;
                (loss, grads, tape.into_bn_stats())
            };
            adam.step(model.params_mut(), &grads);
            model.params_mut().apply_bn_stats(&stats, BN_MOMENTUM);
            loss_sum += loss * batch.len() as f64;
        }
        let error = evaluate_seg(&model, &test)?.error;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_seg_error: Some(error),
            test_t1_accuracy: None,
            test_t2_accuracy: None,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "seg epoch {epoch}/{}: loss {:.5}, test error {error:.5} ({:.1}s)",
            cfg.epochs,
            record.train_loss,
            record.seconds
        );
        records.push(record);
        if best.as_ref().map_or(true, |(e, _, _)| error < *e) {
            best = Some((error, epoch, model.params().clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(Trained {
        model,
        history: History { task: Task::Segmentation, records, best_epoch, train_samples: train.len() },
        rng_state_digest: rng_digest(&rng),
    })
}

/// One labelled classifier input.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub roi: GrayImage,
    pub label_t1: HealthLabel,
    pub label_t2: ConditionLabel,
    pub sample_id: String,
}

/// Cuts ROIs using each sample's ground-truth mask. The classifier is
/// trained on these so that its inputs do not depend on a particular
/// segmentation model.
pub fn rois_from_ground_truth(samples: &[EyeSample]) -> Result<Vec<RoiSample>> {
    samples
        .iter()
        .map(|s| {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{} has no mask to cut an ROI with", s.sample_id)))?;
            let (label_t1, label_t2) = labels_of(s)?;
            Ok(RoiSample { roi: extract_roi(&s.image, mask)?.roi, label_t1, label_t2, sample_id: s.sample_id.clone() })
        })
        .collect()
}

fn labels_of(s: &EyeSample) -> Result<(HealthLabel, ConditionLabel)> {
    match (s.label_t1, s.label_t2) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Validation(format!("{} lacks one of the two task labels", s.sample_id))),
    }
}

/// Wraps ROIs as mask-less samples, e.g. to augment them.
fn roi_as_sample(r: &RoiSample) -> EyeSample {
    EyeSample {
        image: r.roi.clone(),
        mask: None,
        label_t1: Some(r.label_t1),
        label_t2: Some(r.label_t2),
        sample_id: r.sample_id.clone(),
    }
}

fn roi_tensor<T: Float>(rois: &[&RoiSample], size: usize) -> Result<Tensor<T>> {
    let resized: Vec<GrayImage> = rois.iter().map(|r| resize_image(&r.roi, size, size)).collect();
    images_to_tensor(&resized.iter().collect::<Vec<_>>())
}

/// Pooled features and per-sample outputs in inference mode.
pub fn classify_rois<T: Float>(
    model: &MultitaskClassifier<T>,
    rois: &[RoiSample],
) -> Result<(Vec<Vec<f64>>, Vec<crate::classifier::MultitaskOutput>)> {
    let mut features = Vec::with_capacity(rois.len());
    let mut outputs = Vec::with_capacity(rois.len());
    for chunk in rois.chunks(EVAL_BATCH) {
        let refs: Vec<&RoiSample> = chunk.iter().collect();
        let (f, o) = model.infer(&roi_tensor(&refs, model.config().input_size)?)?;
        features.extend((0..f.n()).map(|i| f.image(i).iter().map(|v| v.as_f64()).collect()));
        outputs.extend(o);
    }
    Ok((features, outputs))
}

pub fn evaluate_cls<T: Float>(model: &MultitaskClassifier<T>, rois: &[RoiSample]) -> Result<MultitaskEval> {
    let (_, out) = classify_rois(model, rois)?;
    cls_eval(
        &out.iter().map(|o| o.pred_t1()).collect::<Vec<_>>(),
        &rois.iter().map(|r| r.label_t1).collect::<Vec<_>>(),
        &out.iter().map(|o| o.pred_t2()).collect::<Vec<_>>(),
        &rois.iter().map(|r| r.label_t2).collect::<Vec<_>>(),
    )
}

/// Trains the multitask classifier on ROIs and keeps the epoch with the best
/// test T2 accuracy, then T1 accuracy, then the earliest.
pub fn train_classifier<T: Float>(
    train: &[RoiSample],
    test: &[RoiSample],
    model_cfg: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<Trained<MultitaskClassifier<T>>> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("classifier training needs non-empty train and test splits".into()));
    }
    let train: Vec<RoiSample> = match &cfg.augment {
        None => train.to_vec(),
        Some(p) => expand(&train.iter().map(roi_as_sample).collect::<Vec<_>>(), Some(p))?
            .into_iter()
            .map(|s| {
                let (label_t1, label_t2) = labels_of(&s)?;
                Ok(RoiSample { roi: s.image, label_t1, label_t2, sample_id: s.sample_id })
            })
            .collect::<Result<_>>()?,
    };
    let weights = LossWeights { lambda: cfg.lambda };
    let mut model = MultitaskClassifier::<T>::new(model_cfg.clone(), cfg.seed)?;
    let size = model_cfg.input_size;
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut rng = order_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, cataract_nn::ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rois: Vec<&RoiSample> = batch.iter().map(|&i| &train[i]).collect();
            let x = roi_tensor::<T>(&rois, size)?;
            let y1: Vec<HealthLabel> = rois.iter().map(|r| r.label_t1).collect();
            let y2: Vec<ConditionLabel> = rois.iter().map(|r| r.label_t2).collect();
            let (loss, grads, stats) = {
                let mut tape = Tape::new(model.params(), Mode::Train);
                let xn = tape.input(x);
                let tr = model.trace(&mut tape, xn)?;
                let (loss, d1, d2) =
                    multitask_loss_with_grad(tape.value(tr.t1_logit), tape.value(tr.t2_logits), &y1, &y2, weights)?;
                let grads = tape.backward(vec![(tr.t1_logit, d1), (tr.t2_logits, d2)])?;
                (loss, grads, tape.into_bn_stats())
            };
            adam.step(model.params_mut(), &grads);
            model.params_mut().apply_bn_stats(&stats, BN_MOMENTUM);
            loss_sum += loss * batch.len() as f64;
        }
        let eval = evaluate_cls(&model, test)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_seg_error: None,
            test_t1_accuracy: Some(eval.t1.accuracy),
            test_t2_accuracy: Some(eval.t2.accuracy),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "cls epoch {epoch}/{}: loss {:.5}, test T1 {:.4}, T2 {:.4} ({:.1}s)",
            cfg.epochs,
            record.train_loss,
            eval.t1.accuracy,
            eval.t2.accuracy,
            record.seconds
        );
        records.push(record);
        let key = (eval.t2.accuracy, eval.t1.accuracy);
        if best.as_ref().map_or(true, |(k, _, _)| key > *k) {
            best = Some((key, epoch, model.params().clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(Trained {
        model,
        history: History { task: Task::Classification, records, best_epoch, train_samples: train.len() },
        rng_state_digest: rng_digest(&rng),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub structural_levels: usize,
    pub seg_error: f64,
    pub best_epoch: usize,
}

/// Trains one model per structural level setting with otherwise identical
/// configuration and seed.
pub fn run_ablation(data: &Dataset, base: &PyramidConfig, cfg: &TrainConfig, levels: &[usize]) -> Result<Vec<AblationRow>> {
    if levels.is_empty() {
        return Err(Error::Validation("no structural levels to compare".into()));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l < 2 || l > base.n_blocks) {
        return Err(Error::Validation(format!("structural level {bad} outside 2..={}", base.n_blocks)));
    }
    levels
        .iter()
        .map(|&l| {
            let trained = train_segmentation::<f32>(data, &base.clone().with_levels(l), cfg)?;
            Ok(AblationRow {
                structural_levels: l,
                seg_error: trained.history.best_metric(),
                best_epoch: trained.history.best_epoch,
            })
        })
        .collect()
}
