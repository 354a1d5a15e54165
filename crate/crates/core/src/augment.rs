//! Flip and contrast augmentation. Geometric transforms apply to image and
//! mask alike; contrast changes touch only the image.

use image::imageops;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::EyeSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    None,
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Exactly five positive factors.
    pub contrast_factors: Vec<f64>,
    pub flips: FlipMode,
    /// Output samples per input sample: 5 or 10.
    pub multiplier: usize,
}

pub const DEFAULT_CONTRAST_FACTORS: [f64; 5] = [0.6, 0.8, 1.0, 1.2, 1.4];

impl AugmentPolicy {
    /// Ten variants: {original, flipped} x five contrast factors.
    pub fn segmentation() -> Self {
        Self { contrast_factors: DEFAULT_CONTRAST_FACTORS.to_vec(), flips: FlipMode::Horizontal, multiplier: 10 }
    }

    /// Five variants: original, flipped, and three non-identity contrasts.
    pub fn classification() -> Self {
        Self { contrast_factors: DEFAULT_CONTRAST_FACTORS.to_vec(), flips: FlipMode::Horizontal, multiplier: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contrast_factors.len() != 5 {
            return Err(Error::Param(format!("expected 5 contrast factors, got {}", self.contrast_factors.len())));
        }
        if let Some(f) = self.contrast_factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::Param(format!("contrast factor {f} is not a positive number")));
        }
        if !matches!(self.multiplier, 5 | 10) {
            return Err(Error::Param(format!("unsupported multiplier {} (expected 5 or 10)", self.multiplier)));
        }
        Ok(())
    }

    /// `(flip, contrast factor)` for every output, in output order. The
    /// first entry is always the untouched original when present.
    pub fn variants(&self) -> Result<Vec<(bool, f64)>> {
        self.validate()?;
        let factors = &self.contrast_factors;
        match (self.multiplier, self.flips) {
            (10, FlipMode::Horizontal) => {
                Ok([false, true].iter().flat_map(|&flip| factors.iter().map(move |&f| (flip, f))).collect())
            }
            (10, FlipMode::None) => Err(Error::Param("a multiplier of 10 needs horizontal flips".into())),
            (5, FlipMode::None) => Ok(factors.iter().map(|&f| (false, f)).collect()),
            (5, FlipMode::Horizontal) => {
                let others: Vec<f64> = factors.iter().copied().filter(|&f| f != 1.0).take(3).collect();
                if others.len() < 3 {
                    return Err(Error::Param("a multiplier of 5 needs three non-identity contrast factors".into()));
                }
                let mut v = vec![(false, 1.0), (true, 1.0)];
                v.extend(others.into_iter().map(|f| (false, f)));
                Ok(v)
            }
            _ => unreachable!("multiplier validated"),
        }
    }
}

/// `clamp(round(mean + factor * (v - mean)))` with the image mean.
pub fn adjust_contrast(img: &GrayImage, factor: f64) -> GrayImage {
    if factor == 1.0 {
        return img.clone();
    }
    let raw = img.as_raw();
    let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len().max(1) as f64;
    let data = raw.iter().map(|&v| (mean + factor * (v as f64 - mean)).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

pub fn augment(sample: &EyeSample, policy: &AugmentPolicy) -> Result<Vec<EyeSample>> {
    let variants = policy.variants()?;
    let flipped_image = imageops::flip_horizontal(&sample.image);
    let flipped_mask = sample.mask.as_ref().map(|m| m.flipped_horizontal());
    Ok(variants
        .into_iter()
        .map(|(flip, factor)| {
            let (image, mask) =
                if flip { (&flipped_image, &flipped_mask) } else { (&sample.image, &sample.mask) };
            EyeSample {
                image: adjust_contrast(image, factor),
                mask: mask.clone(),
                label_t1: sample.label_t1,
                label_t2: sample.label_t2,
                sample_id: if !flip && factor == 1.0 {
                    sample.sample_id.clone()
                } else {
                    format!("{}#{}c{factor}", sample.sample_id, if flip { "flip-" } else { "" })
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Mask;

    fn sample() -> EyeSample {
        let image = GrayImage::from_fn(6, 4, |x, y| image::Luma([(x * 40 + y * 7) as u8]));
        EyeSample {
            image,
            mask: Some(Mask::from_fn(6, 4, |x, y| x < 2 && y > 0)),
            label_t1: None,
            label_t2: None,
            sample_id: "s".into(),
        }
    }

    #[test]
    fn ten_variants_with_identity() {
        let s = sample();
        let out = augment(&s, &AugmentPolicy::segmentation()).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[2].image, s.image);
        assert_eq!(out[2].sample_id, "s");
    }

    #[test]
    fn five_variants_match_the_documented_composition() {
        let v = AugmentPolicy::classification().variants().unwrap();
        assert_eq!(v, vec![(false, 1.0), (true, 1.0), (false, 0.6), (false, 0.8), (false, 1.2)]);
        let p = AugmentPolicy { flips: FlipMode::None, ..AugmentPolicy::classification() };
        assert_eq!(p.variants().unwrap().len(), 5);
    }

    #[test]
    fn unsupported_policies_are_rejected() {
        let mut p = AugmentPolicy::segmentation();
        p.multiplier = 7;
        assert!(matches!(augment(&sample(), &p), Err(Error::Param(_))));
        let p = AugmentPolicy { flips: FlipMode::None, ..AugmentPolicy::segmentation() };
        assert!(p.variants().is_err());
        let p = AugmentPolicy { contrast_factors: vec![1.0; 4], ..AugmentPolicy::segmentation() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn contrast_is_about_the_mean() {
        let img = GrayImage::from_raw(2, 1, vec![100, 200]).unwrap();
        assert_eq!(adjust_contrast(&img, 0.5).as_raw(), &vec![125, 175]);
        assert_eq!(adjust_contrast(&img, 4.0).as_raw(), &vec![0, 255]);
    }
}
