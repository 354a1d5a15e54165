use std::fs;

use cataract_core::augment::{augment, AugmentPolicy};
use cataract_core::manifest::{build_synthetic_corpus, load_manifest, synthetic_dataset, Split, SplitCounts};
use cataract_core::raster::Mask;
use cataract_core::sample::{ConditionLabel, HealthLabel};
use cataract_core::synth::{generate_eye, generate_eye_with_geometry, EyeCondition, EyeGenParams};
use cataract_core::Error;
use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(condition: EyeCondition, seed: u64) -> EyeGenParams {
    EyeGenParams::sample(condition, (240, 320), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn cloudy_pupil_is_brighter_than_the_iris() {
    let (s, g) = generate_eye_with_geometry(&params(EyeCondition::PreCataract, 7)).unwrap();
    let (mut pupil, mut iris) = (Vec::new(), Vec::new());
    for (x, y, p) in s.image.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if g.occluded(x, y) || !g.in_iris_disk(x, y) {
            continue;
        }
        if g.in_pupil(x as f64, y as f64) { pupil.push(p.0[0] as f64) } else { iris.push(p.0[0] as f64) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!pupil.is_empty() && !iris.is_empty());
    assert!(mean(&pupil) > mean(&iris), "pupil {} vs iris {}", mean(&pupil), mean(&iris));

    // A healthy pupil is the dark one.
    let (s, g) = generate_eye_with_geometry(&params(EyeCondition::Healthy, 7)).unwrap();
    let (cx, cy) = g.pupil_center;
    assert!(s.image.get_pixel(cx as u32, cy as u32).0[0] < 80);
}

#[test]
fn unoccluded_mask_is_the_rasterised_iris_disk() {
    for seed in 0..5 {
        let mut p = params(EyeCondition::Healthy, seed);
        p.eyelid_droop = 0.0;
        p.specular_count = 0;
        let (s, g) = generate_eye_with_geometry(&p).unwrap();
        let (h, w) = p.canvas;
        let (cx, cy, r) = (g.iris_center.0 as f64, g.iris_center.1 as f64, g.iris_radius as f64);
        let mask = s.mask.unwrap();
        let visible = Mask::from_fn(w, h, |x, y| !g.occluded(x, y));
        for y in 0..h {
            for x in 0..w {
                let inside = (x as f64 - cx).hypot(y as f64 - cy) <= r;
                assert_eq!(mask.get(x, y), inside && visible.get(x, y), "seed {seed} pixel ({x}, {y})");
            }
        }
        // Lids with no droop leave the whole disk visible.
        let disk = Mask::from_fn(w, h, |x, y| (x as f64 - cx).hypot(y as f64 - cy) <= r);
        assert_eq!(mask, disk, "seed {seed}");
    }
}

#[test]
fn every_mask_is_the_disk_minus_the_lids() {
    let data = synthetic_dataset(SplitCounts { train_per_class: 3, test_per_class: 1 }, (120, 160), 3).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (9, 3));
    for condition in EyeCondition::ALL {
        for i in 0..4 {
            let p = cataract_core::manifest::corpus_params(3, condition, i, (120, 160));
            let (s, g) = generate_eye_with_geometry(&p).unwrap();
            let expected = Mask::from_fn(160, 120, |x, y| g.in_iris_disk(x, y) && !g.occluded(x, y));
            assert_eq!(s.mask.as_ref().unwrap(), &expected);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let p = params(EyeCondition::PostCataract, 11);
    let (a, b) = (generate_eye(&p).unwrap(), generate_eye(&p).unwrap());
    assert_eq!(a.image.as_raw(), b.image.as_raw());
    assert_eq!(a.mask, b.mask);
}

#[test]
fn invalid_geometry_is_a_parameter_error() {
    let mut p = params(EyeCondition::Healthy, 0);
    p.iris_radius_px = 2;
    assert!(matches!(generate_eye(&p), Err(Error::Param(_))));
    let mut p = params(EyeCondition::Healthy, 0);
    p.eyelid_droop = 1.5;
    assert!(matches!(generate_eye(&p), Err(Error::Param(_))));
}

#[test]
fn augmentation_contract() {
    let s = generate_eye(&params(EyeCondition::PreCataract, 2)).unwrap();
    let mask = s.mask.clone().unwrap();
    let reversed = Mask::from_fn(mask.width(), mask.height(), |x, y| mask.get(mask.width() - 1 - x, y));
    for policy in [AugmentPolicy::segmentation(), AugmentPolicy::classification()] {
        let out = augment(&s, &policy).unwrap();
        assert_eq!(out.len(), policy.multiplier);
        let identity = policy.variants().unwrap().iter().position(|&v| v == (false, 1.0)).unwrap();
        assert_eq!(out[identity].image, s.image);
        assert_eq!(out[identity].sample_id, s.sample_id);
        for (o, (flip, _)) in out.iter().zip(policy.variants().unwrap()) {
            assert_eq!((o.label_t1, o.label_t2), (s.label_t1, s.label_t2));
            assert_eq!(o.image.dimensions(), s.image.dimensions());
            assert_eq!(o.mask.as_ref().unwrap(), if flip { &reversed } else { &mask });
        }
    }
    let bad = AugmentPolicy { multiplier: 3, ..AugmentPolicy::segmentation() };
    assert!(matches!(augment(&s, &bad), Err(Error::Param(_))));
}

#[test]
fn corpus_round_trip_and_split_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, path) = build_synthetic_corpus(dir.path(), 10, (64, 80), 5).unwrap();
    assert_eq!(manifest.entries.len(), 30);
    assert_eq!((manifest.count(Split::Train), manifest.count(Split::Test)), (24, 6));
    for label in ConditionLabel::ALL {
        let n = manifest.entries.iter().filter(|e| e.split == Split::Train && e.label_t2 == Some(label)).count();
        assert_eq!(n, 8);
    }

    let loaded = load_manifest(&path).unwrap();
    let memory = synthetic_dataset(SplitCounts::stratified(10), (64, 80), 5).unwrap();
    assert_eq!(loaded, memory);

    let first = fs::read(&path).unwrap();
    let again = tempfile::tempdir().unwrap();
    let (_, path2) = build_synthetic_corpus(again.path(), 10, (64, 80), 5).unwrap();
    assert_eq!(first, fs::read(path2).unwrap());
}

fn write_manifest(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn manifest_loading_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    GrayImage::from_pixel(8, 6, image::Luma([90])).save(dir.path().join("a.png")).unwrap();
    GrayImage::from_pixel(8, 6, image::Luma([255])).save(dir.path().join("m.png")).unwrap();

    let path = write_manifest(
        dir.path(),
        r#"{"root": ".", "entries": [
            {"image": "a.png", "mask": "m.png", "label_t1": "healthy", "label_t2": "others", "split": "train"},
            {"image": "a.png", "split": "train"},
            {"image": "a.png", "split": "test"}]}"#,
    );
    let data = load_manifest(&path).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (2, 1));
    assert_eq!(data.train[0].mask, Some(Mask::full(8, 6)));
    assert_eq!(data.train[0].label_t1, Some(HealthLabel::Healthy));

    let path = write_manifest(
        dir.path(),
        r#"{"root": ".", "entries": [
            {"image": "a.png", "label_t1": "healthy", "label_t2": "pre_cataract", "split": "train"}]}"#,
    );
    assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));

    let path = write_manifest(dir.path(), r#"{"root": ".", "entries": [{"image": "gone.png", "split": "test"}]}"#);
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("gone.png"), "{err}");
}
