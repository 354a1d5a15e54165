use cataract_core::augment::{adjust_contrast, augment, AugmentPolicy};
use cataract_core::classifier::MultitaskOutput;
use cataract_core::metrics::{classification_metrics, seg_error};
use cataract_core::postprocess::{close, extract_roi, SeShape, StructuringElement};
use cataract_core::pyramid::predictions_from_logits;
use cataract_core::raster::Mask;
use cataract_core::sample::{ConditionLabel, EyeSample};
use cataract_nn::Tensor;
use image::GrayImage;
use proptest::prelude::*;

fn mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), w * h)
        .prop_map(move |bits| Mask::from_vec(w, h, bits.into_iter().map(u8::from).collect()).unwrap())
}

fn se() -> impl Strategy<Value = StructuringElement> {
    (prop_oneof![Just(SeShape::Square), Just(SeShape::Disk)], 1usize..4)
        .prop_map(|(shape, r)| StructuringElement::new(shape, r).unwrap())
}

fn union(a: &Mask, b: &Mask) -> Mask {
    Mask::from_fn(a.width(), a.height(), |x, y| a.get(x, y) || b.get(x, y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seg_error_is_a_normalised_hamming_distance(a in mask(12, 9), b in mask(12, 9), c in mask(12, 9)) {
        let e = |x: &Mask, y: &Mask| seg_error(&[x.clone()], &[y.clone()]).unwrap().error;
        prop_assert_eq!(e(&a, &b), e(&b, &a));
        prop_assert_eq!(e(&a, &a), 0.0);
        prop_assert!(e(&a, &c) <= e(&a, &b) + e(&b, &c) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&e(&a, &b)));
    }

    #[test]
    fn seg_error_is_the_mean_of_per_sample_errors(pairs in proptest::collection::vec((mask(8, 8), mask(8, 8)), 1..6)) {
        let (g, p): (Vec<Mask>, Vec<Mask>) = pairs.into_iter().unzip();
        let r = seg_error(&g, &p).unwrap();
        let mean = r.per_sample_errors.iter().sum::<f64>() / r.n as f64;
        prop_assert!((r.error - mean).abs() <= 1e-15);
        prop_assert!(r.per_sample_errors.iter().all(|e| (0.0..=1.0).contains(e)));
    }

    #[test]
    fn closing_is_extensive_increasing_and_idempotent(a in mask(20, 16), extra in mask(20, 16), se in se()) {
        let c = close(&a, se);
        prop_assert!(a.is_subset_of(&c));
        prop_assert_eq!(&close(&c, se), &c);
        prop_assert!(c.is_subset_of(&close(&union(&a, &extra), se)));
        prop_assert_eq!(c.dims(), a.dims());
    }

    #[test]
    fn confusion_bookkeeping(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = classification_metrics(&preds, &labels, &ConditionLabel::NAMES).unwrap();
        let total = preds.len() as u64;
        for c in 0..3 {
            let actual = labels.iter().filter(|&&l| l == c).count() as u64;
            prop_assert_eq!(r.confusion[c].iter().sum::<u64>(), actual);
        }
        let trace: u64 = (0..3).map(|c| r.confusion[c][c]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / total as f64);
        let off: u64 = r.confusion.iter().flatten().sum::<u64>() - trace;
        prop_assert!((r.accuracy - (1.0 - off as f64 / total as f64)).abs() <= 1e-12);
        for c in 0..3 {
            let tp = r.confusion[c][c] as f64;
            let predicted: u64 = (0..3).map(|k| r.confusion[k][c]).sum();
            let actual: u64 = r.confusion[c].iter().sum();
            if predicted > 0 && actual > 0 {
                let (p, q) = (tp / predicted as f64, tp / actual as f64);
                let f1 = if p + q > 0.0 { 2.0 * p * q / (p + q) } else { 0.0 };
                prop_assert!((r.f1[c].unwrap() - f1).abs() <= 1e-12);
            } else {
                prop_assert!(r.f1[c].is_none());
            }
        }
    }

    #[test]
    fn mask_probabilities_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 2 * 5 * 7)) {
        let logits = Tensor::<f64>::from_vec([1, 2, 5, 7], values).unwrap();
        let pred = predictions_from_logits(&logits).remove(0);
        for y in 0..5 {
            for x in 0..7 {
                let (f, b) = (pred.prob.at(0, 0, y, x), pred.prob.at(0, 1, y, x));
                prop_assert!(f >= 0.0 && b >= 0.0 && (f + b - 1.0).abs() <= 1e-6);
                prop_assert_eq!(pred.mask.get(x, y), f >= b);
            }
        }
    }

    #[test]
    fn t2_distribution_is_a_distribution(t1 in -40.0f64..40.0, t2 in proptest::array::uniform3(-40.0f64..40.0)) {
        let o = MultitaskOutput::from_logits(t1, t2);
        prop_assert!((0.0..=1.0).contains(&o.p_t1));
        prop_assert!(o.dist_t2.iter().all(|&p| p >= 0.0));
        prop_assert!((o.dist_t2.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn roi_is_zero_outside_the_mask(m in mask(24, 18), v in 1u8..=255) {
        let img = GrayImage::from_pixel(24, 18, image::Luma([v]));
        let r = extract_roi(&img, &m).unwrap();
        for y in 0..18 {
            for x in 0..24 {
                let expected = if m.get(x, y) { v } else { 0 };
                prop_assert_eq!(r.masked.get_pixel(x as u32, y as u32).0[0], expected);
            }
        }
        prop_assert_eq!(r.roi.dimensions(), (224, 224));
        prop_assert_eq!(r.empty_mask, m.is_empty());
    }

    #[test]
    fn photometric_augmentation_never_touches_the_mask(m in mask(10, 7), factor in 0.1f64..3.0, seed in any::<u8>()) {
        let img = GrayImage::from_fn(10, 7, |x, y| image::Luma([(x as u8).wrapping_mul(seed).wrapping_add(y as u8 * 13)]));
        prop_assert_eq!(adjust_contrast(&img, factor).dimensions(), img.dimensions());
        let s = EyeSample { image: img, mask: Some(m.clone()), label_t1: None, label_t2: None, sample_id: "p".into() };
        for policy in [AugmentPolicy::segmentation(), AugmentPolicy::classification()] {
            let out = augment(&s, &policy).unwrap();
            prop_assert_eq!(out.len(), policy.multiplier);
            for (o, (flip, _)) in out.iter().zip(policy.variants().unwrap()) {
                let expected = if flip { m.flipped_horizontal() } else { m.clone() };
                prop_assert_eq!(o.mask.as_ref().unwrap(), &expected);
            }
        }
    }
}
