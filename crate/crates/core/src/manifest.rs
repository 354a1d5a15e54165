//! JSON dataset manifests and the on-disk synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::sample::{ConditionLabel, EyeSample, HealthLabel};
use crate::synth::{generate_eye, EyeCondition, EyeGenParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_t1: Option<HealthLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_t2: Option<ConditionLabel>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Resolved relative to the manifest file's directory when relative.
    pub root: String,
    pub entries: Vec<ManifestEntry>,
}

/// Samples partitioned by split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<EyeSample>,
    pub test: Vec<EyeSample>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

pub fn load_image(path: &Path) -> Result<image::GrayImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map(|img| img.to_luma8()).map_err(|source| Error::Image { path: path.into(), source })
}

fn sample_id(rel: &str) -> String {
    Path::new(rel).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| rel.to_string())
}

/// Reads a manifest and decodes every referenced raster.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let root = base.join(&manifest.root);
    let mut out = Dataset::default();
    for entry in &manifest.entries {
        let image = load_image(&root.join(&entry.image))?;
        let mask = match &entry.mask {
            Some(m) => Some(Mask::from_gray(&load_image(&root.join(m))?)),
            None => None,
        };
        let sample = EyeSample {
            image,
            mask,
            label_t1: entry.label_t1,
            label_t2: entry.label_t2,
            sample_id: sample_id(&entry.image),
        };
        sample.validate()?;
        match entry.split {
            Split::Train => out.train.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

/// SplitMix64 finaliser; derives independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generation parameters of sample `index` of `condition`. Pure in its
/// arguments, so samples can be produced in any order.
pub fn corpus_params(seed: u64, condition: EyeCondition, index: usize, canvas: (usize, usize)) -> EyeGenParams {
    let stream = mix(seed ^ mix(condition as u64 + 1) ^ mix((index as u64) << 8));
    EyeGenParams::sample(condition, canvas, &mut ChaCha8Rng::seed_from_u64(stream))
}

/// How many samples of each class land in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl SplitCounts {
    /// Stratified 80/20 split of `n_per_class`.
    pub fn stratified(n_per_class: usize) -> Self {
        let train = ((n_per_class as f64) * 0.8).round() as usize;
        Self { train_per_class: train, test_per_class: n_per_class - train }
    }

    pub fn total(&self) -> usize {
        3 * (self.train_per_class + self.test_per_class)
    }
}

/// Generates the corpus in memory: per class, the first `train_per_class`
/// indices go to train and the rest to test. Sample ids match the file stems
/// written by [`build_corpus`].
pub fn synthetic_dataset(counts: SplitCounts, canvas: (usize, usize), seed: u64) -> Result<Dataset> {
    let mut out = Dataset::default();
    for (condition, index, split) in corpus_layout(counts) {
        let mut s = generate_eye(&corpus_params(seed, condition, index, canvas))?;
        s.sample_id = corpus_id(condition, index);
        match split {
            Split::Train => out.train.push(s),
            Split::Test => out.test.push(s),
        }
    }
    Ok(out)
}

fn corpus_layout(counts: SplitCounts) -> Vec<(EyeCondition, usize, Split)> {
    let per_class = counts.train_per_class + counts.test_per_class;
    let mut layout = Vec::with_capacity(3 * per_class);
    for split in [Split::Train, Split::Test] {
        for condition in EyeCondition::ALL {
            let range = match split {
                Split::Train => 0..counts.train_per_class,
                Split::Test => counts.train_per_class..per_class,
            };
            layout.extend(range.map(|i| (condition, i, split)));
        }
    }
    layout
}

fn corpus_id(condition: EyeCondition, index: usize) -> String {
    format!("{}_{index:04}", condition.name())
}

/// Writes `images/*.png`, `masks/*.png` and `manifest.json` under `out_dir`.
pub fn build_corpus(out_dir: &Path, counts: SplitCounts, canvas: (usize, usize), seed: u64) -> Result<(DatasetManifest, PathBuf)> {
    if counts.train_per_class + counts.test_per_class == 0 {
        return Err(Error::Param("corpus needs at least one sample per class".into()));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(counts.total());
    for (condition, index, split) in corpus_layout(counts) {
        let sample = generate_eye(&corpus_params(seed, condition, index, canvas))?;
        let id = corpus_id(condition, index);
        let (image_rel, mask_rel) = (format!("images/{id}.png"), format!("masks/{id}.png"));
        let image_path = out_dir.join(&image_rel);
        sample.image.save(&image_path).map_err(|source| Error::Image { path: image_path, source })?;
        let mask_path = out_dir.join(&mask_rel);
        let mask = sample.mask.as_ref().expect("generated samples carry masks");
        mask.to_gray().save(&mask_path).map_err(|source| Error::Image { path: mask_path, source })?;
        entries.push(ManifestEntry {
            image: image_rel,
            mask: Some(mask_rel),
            label_t1: sample.label_t1,
            label_t2: sample.label_t2,
            split,
        });
    }
    let manifest = DatasetManifest { root: ".".into(), entries };
    let path = out_dir.join("manifest.json");
    manifest.write(&path)?;
    Ok((manifest, path))
}

/// [`build_corpus`] with the stratified 80/20 split.
pub fn build_synthetic_corpus(
    out_dir: &Path,
    n_per_class: usize,
    canvas: (usize, usize),
    seed: u64,
) -> Result<(DatasetManifest, PathBuf)> {
    if n_per_class == 0 {
        return Err(Error::Param("n_per_class must be at least 1".into()));
    }
    build_corpus(out_dir, SplitCounts::stratified(n_per_class), canvas, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_counts() {
        assert_eq!(SplitCounts::stratified(10), SplitCounts { train_per_class: 8, test_per_class: 2 });
        assert_eq!(SplitCounts::stratified(1), SplitCounts { train_per_class: 1, test_per_class: 0 });
        assert_eq!(SplitCounts::stratified(100).total(), 300);
    }

    #[test]
    fn per_sample_seeds_differ() {
        let a = corpus_params(1, EyeCondition::Healthy, 0, (240, 320));
        let b = corpus_params(1, EyeCondition::Healthy, 1, (240, 320));
        let c = corpus_params(1, EyeCondition::PreCataract, 0, (240, 320));
        assert_ne!(a.rng_seed, b.rng_seed);
        assert_ne!(a.rng_seed, c.rng_seed);
        assert_eq!(a, corpus_params(1, EyeCondition::Healthy, 0, (240, 320)));
    }
}
