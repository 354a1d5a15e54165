//! Segmentation error (fraction of disagreeing pixels) and classification
//! metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::sample::{ConditionLabel, HealthLabel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvalResult {
    /// Disagreeing pixels over `n * height * width`.
    pub error: f64,
    pub per_sample_errors: Vec<f64>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

/// Fraction of pixels where `gt` and `pred` disagree, over all pairs.
pub fn seg_error(gt: &[Mask], pred: &[Mask]) -> Result<SegEvalResult> {
    if gt.is_empty() {
        return Err(Error::Validation("seg_error needs at least one mask pair".into()));
    }
    if gt.len() != pred.len() {
        return Err(Error::Validation(format!("{} ground-truth masks against {} predictions", gt.len(), pred.len())));
    }
    let (width, height) = gt[0].dims();
    let mut mismatches = 0u64;
    let mut per_sample_errors = Vec::with_capacity(gt.len());
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        if g.dims() != (width, height) || p.dims() != (width, height) {
            return Err(Error::Validation(format!(
                "pair {i}: masks {:?} and {:?}, expected {:?}",
                g.dims(),
                p.dims(),
                (width, height)
            )));
        }
        let count = g.data().iter().zip(p.data()).filter(|(a, b)| a != b).count() as u64;
        mismatches += count;
        per_sample_errors.push(count as f64 / (width * height) as f64);
    }
    Ok(SegEvalResult {
        error: mismatches as f64 / (gt.len() * width * height) as f64,
        per_sample_errors,
        n: gt.len(),
        height,
        width,
    })
}

/// Metrics of one classification task. `None` marks a value that is
/// undefined (a zero denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsEvalResult {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    /// Means over the classes where the value is defined.
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Rows are actual classes, columns predicted.
    pub confusion: Vec<Vec<u64>>,
    /// Each row divided by its sum; `None` for classes with no samples.
    pub confusion_normalized: Vec<Vec<Option<f64>>>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Evaluates class-index predictions against labels.
pub fn classification_metrics(preds: &[usize], labels: &[usize], class_names: &[&str]) -> Result<ClsEvalResult> {
    let k = class_names.len();
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!("{} predictions against {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class index {bad} outside the {k} known classes")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let total = preds.len() as f64;
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        precision.push(p);
        recall.push(r);
        f1.push(match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        });
    }
    let confusion_normalized = confusion
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            row.iter().map(|&v| ratio(v, sum)).collect()
        })
        .collect();
    Ok(ClsEvalResult {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        accuracy: correct as f64 / total,
        macro_precision: mean_defined(&precision),
        macro_recall: mean_defined(&recall),
        macro_f1: mean_defined(&f1),
        precision,
        recall,
        f1,
        confusion,
        confusion_normalized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskEval {
    pub t1: ClsEvalResult,
    pub t2: ClsEvalResult,
}

/// Metrics for both tasks.
pub fn cls_eval(
    preds_t1: &[HealthLabel],
    labels_t1: &[HealthLabel],
    preds_t2: &[ConditionLabel],
    labels_t2: &[ConditionLabel],
) -> Result<MultitaskEval> {
    let idx1 = |v: &[HealthLabel]| v.iter().map(|l| l.index()).collect::<Vec<_>>();
    let idx2 = |v: &[ConditionLabel]| v.iter().map(|l| l.index()).collect::<Vec<_>>();
    Ok(MultitaskEval {
        t1: classification_metrics(&idx1(preds_t1), &idx1(labels_t1), &HealthLabel::NAMES)?,
        t2: classification_metrics(&idx2(preds_t2), &idx2(labels_t2), &ConditionLabel::NAMES)?,
    })
}
