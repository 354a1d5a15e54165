//! End-to-end inference: segment, close, cut the ROI, classify.

use std::path::Path;
use std::time::Instant;

use cataract_nn::Float;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, load_segmentation};
use crate::classifier::{MultitaskClassifier, MultitaskOutput};
use crate::error::Result;
use crate::harness::predict_seg;
use crate::manifest::load_image;
use crate::postprocess::{close, extract_roi, StructuringElement};
use crate::pyramid::PyramidNet;
use crate::raster::{images_to_tensor, resize_image, Mask};

/// Wall-clock seconds per stage. `total` spans all stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load: f64,
    pub segment: f64,
    pub postprocess: f64,
    pub roi: f64,
    pub classify: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.load + self.segment + self.postprocess + self.roi + self.classify
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Closed mask at the input image's resolution.
    pub mask: Mask,
    pub roi: GrayImage,
    pub empty_mask: bool,
    pub output: MultitaskOutput,
    pub timing: StageTimings,
}

/// Runs every stage on an image already in memory. The mask is predicted
/// and closed at network resolution, then scaled back to the image.
pub fn run_pipeline_on<T: Float>(
    image: &GrayImage,
    seg: &PyramidNet<T>,
    cls: &MultitaskClassifier<T>,
    se: StructuringElement,
) -> Result<PipelineOutput> {
    let mut timing = StageTimings::default();
    run_stages(image, seg, cls, se, &mut timing, Instant::now())
}

fn run_stages<T: Float>(
    image: &GrayImage,
    seg: &PyramidNet<T>,
    cls: &MultitaskClassifier<T>,
    se: StructuringElement,
    timing: &mut StageTimings,
    start: Instant,
) -> Result<PipelineOutput> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (nh, nw) = seg.config().input_size;

    let t = Instant::now();
    let raw = predict_seg(seg, &[resize_image(image, nw, nh)])?.remove(0);
    timing.segment = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mask = close(&raw, se).resize_nearest(w, h);
    timing.postprocess = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let roi = extract_roi(image, &mask)?;
    let size = cls.config().input_size;
    let x = images_to_tensor::<T>(&[&resize_image(&roi.roi, size, size)])?;
    timing.roi = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let output = cls.forward(&x)?.remove(0);
    timing.classify = t.elapsed().as_secs_f64();

    timing.total = start.elapsed().as_secs_f64();
    Ok(PipelineOutput { mask, roi: roi.roi, empty_mask: roi.empty_mask, output, timing: *timing })
}

/// Loads both checkpoints, then runs the pipeline on one image file.
/// Checkpoint loading is excluded from the timings.
pub fn run_pipeline(image_path: &Path, seg_ckpt: &Path, cls_ckpt: &Path, se: StructuringElement) -> Result<PipelineOutput> {
    let (seg, _) = load_segmentation::<f32>(seg_ckpt)?;
    let (cls, _) = load_classifier::<f32>(cls_ckpt)?;
    let start = Instant::now();
    let image = load_image(image_path)?;
    let mut timing = StageTimings { load: start.elapsed().as_secs_f64(), ..Default::default() };
    run_stages(&image, &seg, &cls, se, &mut timing, start)
}
