use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cataract_core::checkpoint::{load_classifier, load_segmentation, save_classifier, save_segmentation};
use cataract_core::classifier::ClassifierConfig;
use cataract_core::embedding::{silhouette, tsne_2d, TsneParams};
use cataract_core::harness::{
    classify_rois, evaluate_cls, predict_seg, rois_from_ground_truth, run_ablation, train_classifier,
    train_segmentation, History, RoiSample, Task, TrainConfig,
};
use cataract_core::manifest::{build_synthetic_corpus, load_image, load_manifest, DatasetManifest, ManifestEntry, Split};
use cataract_core::metrics::seg_error;
use cataract_core::pipeline::run_pipeline;
use cataract_core::postprocess::{SeShape, StructuringElement};
use cataract_core::pyramid::PyramidConfig;
use cataract_core::raster::{resize_image, Mask};
use cataract_core::sample::{ConditionLabel, EyeSample, HealthLabel};
use serde::{Deserialize, Serialize};

use crate::plot;
use crate::{
    AblateArgs, EvalClsArgs, EvalSegArgs, GenDataArgs, InferArgs, ReportArgs, TrainClsArgs, TrainCommon, TrainSegArgs,
    OUT_DIR_ENV,
};

fn out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let base = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        base.join(command)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed JSON in {}", path.display()))
}

fn split_of(name: &str) -> Split {
    if name == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

fn samples_of(manifest: &Path, split: Split) -> Result<Vec<EyeSample>> {
    let data = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    Ok(match split {
        Split::Train => data.train,
        Split::Test => data.test,
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let (manifest, path) = build_synthetic_corpus(&a.out, a.n_per_class, a.canvas, a.seed)?;
    let count = |c: ConditionLabel| manifest.entries.iter().filter(|e| e.label_t2 == Some(c)).count();
    println!("wrote {} images to {}", manifest.entries.len(), a.out.display());
    for c in ConditionLabel::ALL {
        println!("  {}: {}", c.name(), count(c));
    }
    println!(
        "  train: {}, test: {}",
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    println!("manifest: {}", path.display());
    Ok(())
}

fn train_config(common: &TrainCommon, task: Task) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::read(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::for_task(task),
    };
    ensure!(cfg.task == task, "{:?} config given to a {task:?} command", cfg.task);
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if common.no_augment {
        cfg.augment = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pyramid_config(path: Option<&Path>, levels: Option<usize>) -> Result<PyramidConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => PyramidConfig::default(),
    };
    if let Some(l) = levels {
        cfg = cfg.with_levels(l);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_history(dir: &Path, history: &History, cfg: &TrainConfig) -> Result<()> {
    history.write_json(&dir.join("history.json"))?;
    history.write_csv(&dir.join("history.csv"))?;
    write_json(&dir.join("train_config.json"), cfg)
}

pub fn train_seg(a: TrainSegArgs) -> Result<()> {
    let cfg = train_config(&a.common, Task::Segmentation)?;
    let model_cfg = pyramid_config(a.model_config.as_deref(), a.levels)?;
    let data = load_manifest(&a.common.manifest).with_context(|| format!("loading {}", a.common.manifest.display()))?;
    let dir = out_dir(a.common.out, "train-seg");
    let run = train_segmentation::<f32>(&data, &model_cfg, &cfg)?;
    create_dir(&dir)?;
    save_segmentation(&dir.join("checkpoint"), &run, &cfg)?;
    write_history(&dir, &run.history, &cfg)?;
    println!(
        "best test seg error {:.6} at epoch {} of {}; checkpoint {}",
        run.history.best_metric(),
        run.history.best_epoch,
        cfg.epochs,
        dir.join("checkpoint").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SegReport<'a> {
    split: &'a str,
    sample_ids: Vec<String>,
    #[serde(flatten)]
    result: cataract_core::metrics::SegEvalResult,
}

/// Predictions are made at network resolution and compared at image
/// resolution after nearest-neighbour scaling.
pub fn eval_seg(a: EvalSegArgs) -> Result<()> {
    let samples = samples_of(&a.manifest, split_of(&a.split))?;
    ensure!(!samples.is_empty(), "{} has no {} samples", a.manifest.display(), a.split);
    let gt = samples
        .iter()
        .map(|s| s.mask.clone().with_context(|| format!("{} has no ground-truth mask", s.sample_id)))
        .collect::<Result<Vec<Mask>>>()?;
    let preds: Vec<Mask> = match (&a.ckpt, &a.pred_dir) {
        (Some(ckpt), _) => {
            let (model, _) = load_segmentation::<f32>(ckpt)?;
            let (h, w) = model.config().input_size;
            let resized: Vec<_> = samples.iter().map(|s| resize_image(&s.image, w, h)).collect();
            predict_seg(&model, &resized)?
                .into_iter()
                .zip(&samples)
                .map(|(m, s)| m.resize_nearest(s.width(), s.height()))
                .collect()
        }
        (None, Some(dir)) => samples
            .iter()
            .map(|s| Ok(Mask::from_gray(&load_image(&dir.join(format!("{}.png", s.sample_id)))?)))
            .collect::<Result<_>>()?,
        (None, None) => bail!("one of --ckpt or --pred-dir is required"),
    };
    let result = seg_error(&gt, &preds)?;
    if let Some(dir) = &a.save_masks {
        save_masks(dir, &a.manifest, &samples, &preds)?;
    }
    println!("seg error over {} {} samples: {:.6}", result.n, a.split, result.error);
    let path = a.out.unwrap_or_else(|| out_dir(None, "eval-seg").join("seg_eval.json"));
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let sample_ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    write_json(&path, &SegReport { split: &a.split, sample_ids, result })?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes each mask as `<id>.png` plus a manifest pairing the original
/// images with these masks, so predictions can serve as ground truth.
fn save_masks(dir: &Path, manifest: &Path, samples: &[EyeSample], masks: &[Mask]) -> Result<()> {
    create_dir(dir)?;
    let source = DatasetManifest::read(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(".")).join(&source.root);
    let base = fs::canonicalize(&base).with_context(|| format!("resolving {}", base.display()))?;
    let dir_abs = fs::canonicalize(dir)?;
    let mut entries = Vec::new();
    for (s, m) in samples.iter().zip(masks) {
        let path = dir.join(format!("{}.png", s.sample_id));
        m.to_gray().save(&path).with_context(|| format!("writing {}", path.display()))?;
        let image = source
            .entries
            .iter()
            .find(|e| Path::new(&e.image).file_stem().is_some_and(|st| st.to_string_lossy() == s.sample_id))
            .with_context(|| format!("{} missing from {}", s.sample_id, manifest.display()))?;
        entries.push(ManifestEntry {
            image: base.join(&image.image).to_string_lossy().into_owned(),
            mask: Some(dir_abs.join(format!("{}.png", s.sample_id)).to_string_lossy().into_owned()),
            ..image.clone()
        });
    }
    DatasetManifest { root: ".".into(), entries }.write(&dir.join("manifest.json"))?;
    Ok(())
}

pub fn train_cls(a: TrainClsArgs) -> Result<()> {
    let mut cfg = train_config(&a.common, Task::Classification)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let model_cfg = ClassifierConfig {
        backbone: a.backbone,
        pretrained_weights_path: a.pretrained.clone(),
        head_widths: a.head_widths.clone(),
        base_width: a.base_width,
        input_size: a.input_size,
    };
    model_cfg.validate()?;
    let data = load_manifest(&a.common.manifest).with_context(|| format!("loading {}", a.common.manifest.display()))?;
    let train = rois_from_ground_truth(&data.train)?;
    let test = rois_from_ground_truth(&data.test)?;
    let dir = out_dir(a.common.out, "train-cls");
    let run = train_classifier::<f32>(&train, &test, &model_cfg, &cfg)?;
    create_dir(&dir)?;
    save_classifier(&dir.join("checkpoint"), &run, &cfg)?;
    write_history(&dir, &run.history, &cfg)?;
    let best = run.history.best();
    println!(
        "best epoch {} of {}: test T1 accuracy {:.4}, T2 accuracy {:.4}; checkpoint {}",
        best.epoch,
        cfg.epochs,
        best.test_t1_accuracy.unwrap_or(f64::NAN),
        best.test_t2_accuracy.unwrap_or(f64::NAN),
        dir.join("checkpoint").display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureFile {
    pub sample_ids: Vec<String>,
    pub label_t1: Vec<HealthLabel>,
    pub label_t2: Vec<ConditionLabel>,
    pub features: Vec<Vec<f64>>,
}

pub fn eval_cls(a: EvalClsArgs) -> Result<()> {
    let samples = samples_of(&a.manifest, split_of(&a.split))?;
    ensure!(!samples.is_empty(), "{} has no {} samples", a.manifest.display(), a.split);
    let (model, _) = load_classifier::<f32>(&a.ckpt)?;
    let rois: Vec<RoiSample> = rois_from_ground_truth(&samples)?;
    let eval = evaluate_cls(&model, &rois)?;
    println!("T1 accuracy {:.4}, macro F1 {:?}", eval.t1.accuracy, eval.t1.macro_f1);
    println!("T2 accuracy {:.4}, macro F1 {:?}", eval.t2.accuracy, eval.t2.macro_f1);
    println!("T2 confusion (rows actual {:?}):", eval.t2.class_names);
    for row in &eval.t2.confusion {
        println!("  {row:?}");
    }
    let path = a.out.unwrap_or_else(|| out_dir(None, "eval-cls").join("cls_eval.json"));
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_json(&path, &eval)?;
    println!("wrote {}", path.display());
    if let Some(fpath) = &a.features {
        let (features, _) = classify_rois(&model, &rois)?;
        let file = FeatureFile {
            sample_ids: rois.iter().map(|r| r.sample_id.clone()).collect(),
            label_t1: rois.iter().map(|r| r.label_t1).collect(),
            label_t2: rois.iter().map(|r| r.label_t2).collect(),
            features,
        };
        if let Some(parent) = fpath.parent() {
            create_dir(parent)?;
        }
        write_json(fpath, &file)?;
        println!("wrote {}", fpath.display());
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = train_config(&a.common, Task::Segmentation)?;
    let base = pyramid_config(a.model_config.as_deref(), None)?;
    if let Some(&bad) = a.levels.iter().find(|&&l| l < 2 || l > base.n_blocks) {
        bail!("structural level {bad} outside 2..={}", base.n_blocks);
    }
    let data = load_manifest(&a.common.manifest).with_context(|| format!("loading {}", a.common.manifest.display()))?;
    let dir = out_dir(a.common.out, "ablate");
    let rows = run_ablation(&data, &base, &cfg, &a.levels)?;
    create_dir(&dir)?;
    write_json(&dir.join("ablation.json"), &rows)?;
    let mut csv = String::from("structural_levels,seg_error,best_epoch\n");
    println!("| structural levels | seg error | best epoch |\n|---|---|---|");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.structural_levels, r.seg_error, r.best_epoch));
        println!("| {} | {:.6} | {} |", r.structural_levels, r.seg_error, r.best_epoch);
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(())
}

#[derive(Serialize)]
struct InferReport {
    image: PathBuf,
    p_t1: f64,
    dist_t2: [f64; 3],
    pred_t1: HealthLabel,
    pred_t2: ConditionLabel,
    empty_mask: bool,
    mask_pixels: usize,
    timing: cataract_core::pipeline::StageTimings,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let se = StructuringElement::new(SeShape::Square, a.close_radius)?;
    let out = run_pipeline(&a.image, &a.seg_ckpt, &a.cls_ckpt, se)?;
    let dir = out_dir(a.out, "infer");
    create_dir(&dir)?;
    out.mask.to_gray().save(dir.join("mask.png"))?;
    out.roi.save(dir.join("roi.png"))?;
    let report = InferReport {
        image: a.image.clone(),
        p_t1: out.output.p_t1,
        dist_t2: out.output.dist_t2,
        pred_t1: out.output.pred_t1(),
        pred_t2: out.output.pred_t2(),
        empty_mask: out.empty_mask,
        mask_pixels: out.mask.count_ones(),
        timing: out.timing,
    };
    if out.empty_mask {
        log::warn!("predicted mask is empty; classified a centred crop instead");
    }
    write_json(&dir.join("result.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (stem.as_str(), path.parent().and_then(|p| p.file_name())) {
        ("history", Some(parent)) => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

#[derive(Serialize)]
struct EmbeddingReport {
    method: &'static str,
    params: TsneParams,
    effective_perplexity: f64,
    silhouette_t1: f64,
    sample_ids: Vec<String>,
    label_t1: Vec<HealthLabel>,
    points: Vec<[f64; 2]>,
}

pub fn report(a: ReportArgs) -> Result<()> {
    ensure!(!a.history.is_empty(), "no --history files given; nothing to report");
    let mut runs = Vec::with_capacity(a.history.len());
    for p in &a.history {
        let h: History = read_json(p)?;
        ensure!(!h.records.is_empty() && h.best_epoch >= 1 && h.best_epoch <= h.records.len(), "{}: history has no usable epochs", p.display());
        runs.push((run_name(p), h));
    }
    let features: Option<FeatureFile> = a.features.as_deref().map(read_json).transpose()?;
    let dir = out_dir(a.out_dir, "report");
    create_dir(&dir)?;

    let groups: Vec<(String, Vec<(String, f64)>)> = runs
        .iter()
        .map(|(name, h)| {
            let b = h.best();
            let bars = match h.task {
                Task::Segmentation => vec![("seg error".to_string(), b.test_seg_error.unwrap_or(0.0))],
                Task::Classification => vec![
                    ("T1 accuracy".to_string(), b.test_t1_accuracy.unwrap_or(0.0)),
                    ("T2 accuracy".to_string(), b.test_t2_accuracy.unwrap_or(0.0)),
                ],
            };
            (name.clone(), bars)
        })
        .collect();
    plot::bar_chart(&groups).save(dir.join("metrics.png"))?;

    let mut md = String::from("# Run summary\n\n| run | task | epochs | best epoch | train loss | seg error | T1 accuracy | T2 accuracy |\n|---|---|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (name, h) in &runs {
        let b = h.best();
        md.push_str(&format!(
            "| {name} | {:?} | {} | {} | {:.5} | {} | {} | {} |\n",
            h.task,
            h.records.len(),
            h.best_epoch,
            b.train_loss,
            fmt(b.test_seg_error),
            fmt(b.test_t1_accuracy),
            fmt(b.test_t2_accuracy)
        ));
    }
    md.push_str("\nBars in `metrics.png` follow the table order; within a run, seg error or T1 then T2 accuracy.\n");

    if let Some(f) = features {
        let params = TsneParams { perplexity: a.perplexity, seed: a.seed, ..TsneParams::default() };
        let points = tsne_2d(&f.features, &params)?;
        let labels: Vec<usize> = f.label_t1.iter().map(|l| l.index()).collect();
        let as_vecs: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let sil = silhouette(&as_vecs, &labels)?;
        plot::scatter(&points, &labels).save(dir.join("embedding_t1.png"))?;
        write_json(
            &dir.join("embedding.json"),
            &EmbeddingReport {
                method: "exact t-SNE, Euclidean distance, seeded Gaussian start",
                params,
                effective_perplexity: params.effective_perplexity(points.len()),
                silhouette_t1: sil,
                sample_ids: f.sample_ids.clone(),
                label_t1: f.label_t1.clone(),
                points,
            },
        )?;
        md.push_str(&format!(
            "\n## Feature embedding\n\n`embedding_t1.png`: {} samples, healthy in blue, unhealthy in red. Silhouette of the healthy/unhealthy split in the 2-D embedding: {sil:.4} (seed {}, perplexity {:.1}).\n",
            f.features.len(),
            a.seed,
            params.effective_perplexity(f.features.len())
        ));
    }
    fs::write(dir.join("summary.md"), &md)?;
    print!("{md}");
    println!("wrote report to {}", dir.display());
    Ok(())
}
