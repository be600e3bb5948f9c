use std::collections::BTreeSet;

use planet_core::dataio::*;
use planet_core::training::make_folds;
use planet_core::{BinMask, Grid, Image, STANDARD_SIDE};
use proptest::prelude::*;

fn sample(h: usize, w: usize) -> ImageSample {
    let image: Image = Grid::from_fn(h, w, |r, c| ((r + c) % 7) as f32 / 6.0);
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mask: BinMask = Grid::from_fn(h, w, |r, c| {
        u8::from(((r as f64 - ch) / (h as f64 / 4.0)).powi(2) + ((c as f64 - cw) / (w as f64 / 4.0)).powi(2) <= 1.0)
    });
    ImageSample {
        patient_id: "p".into(),
        slice_index: 0,
        image,
        mask,
        source_size: (h, w),
    }
}

fn patients(n: usize) -> BTreeSet<String> {
    (0..n).map(|i| format!("pt{i:03}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn standardized_canvas_keeps_aspect_and_mask_fraction(h in 8usize..600, w in 8usize..600) {
        let s = sample(h, w);
        let canvas = standardize(&s).unwrap();
        prop_assert_eq!(canvas.image.dims(), (STANDARD_SIDE, STANDARD_SIDE));
        prop_assert_eq!(canvas.mask.dims(), (STANDARD_SIDE, STANDARD_SIDE));
        prop_assert_eq!(canvas.content_height.max(canvas.content_width), STANDARD_SIDE);
        let scale = STANDARD_SIDE as f64 / h.max(w) as f64;
        prop_assert!((canvas.scale_applied - scale).abs() < 1e-12);
        prop_assert!((canvas.content_height as f64 - h as f64 * scale).abs() <= 0.5 + 1e-9);
        prop_assert!((canvas.content_width as f64 - w as f64 * scale).abs() <= 0.5 + 1e-9);
        let g = canvas.geometry(s.source_size);
        prop_assert_eq!(g.pad_top + g.content_height + g.pad_bottom, STANDARD_SIDE);
        prop_assert_eq!(g.pad_left + g.content_width + g.pad_right, STANDARD_SIDE);
        prop_assert!(g.pad_bottom >= g.pad_top && g.pad_bottom - g.pad_top <= 1);
        prop_assert!(canvas.mask.is_binary());
        if h.min(w).min(canvas.content_height).min(canvas.content_width) >= 16 {
            let before = s.mask.area() as f64 / (h * w) as f64;
            let content = (canvas.content_height * canvas.content_width) as f64;
            let after = canvas.mask.area() as f64 / content;
            prop_assert!((before - after).abs() < 0.02, "{before} vs {after}");
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..250, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let all = patients(n);
        let split = split_patients(all.clone(), frac, seed).unwrap();
        prop_assert!(split.train_patients.is_disjoint(&split.test_patients));
        let union: BTreeSet<String> = split.train_patients.union(&split.test_patients).cloned().collect();
        prop_assert_eq!(union, all);
        prop_assert_eq!(split.test_patients.len(), test_patient_count(n, frac));
        prop_assert!(!split.train_patients.is_empty() && !split.test_patients.is_empty());
    }

    #[test]
    fn folds_partition_patients(n in 2usize..120, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let all = patients(n);
        let plan = make_folds(&all, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            prop_assert!(fold.train.is_disjoint(&fold.validation));
            let union: BTreeSet<String> = fold.train.union(&fold.validation).cloned().collect();
            prop_assert_eq!(&union, &all);
            let size = fold.validation.len();
            prop_assert!(size == n / k || size == n / k + 1);
            for p in &fold.validation {
                prop_assert!(seen.insert(p.clone()), "{} validated twice", p);
            }
        }
        prop_assert_eq!(seen, all);
    }
}

#[test]
fn standardize_is_idempotent_on_standard_canvases() {
    let s = sample(300, 180);
    let canvas = standardize(&s).unwrap();
    let again = ImageSample {
        image: canvas.image.clone(),
        mask: canvas.mask.clone(),
        source_size: (STANDARD_SIDE, STANDARD_SIDE),
        ..s
    };
    let twice = standardize(&again).unwrap();
    assert_eq!(twice.image, canvas.image);
    assert_eq!(twice.mask, canvas.mask);
    assert_eq!(twice.scale_applied, 1.0);
}

#[test]
fn split_follows_patients_not_slices() {
    let mut samples = Vec::new();
    for p in 0..10 {
        for k in 0..5 {
            samples.push(ImageSample {
                patient_id: format!("pt{p}"),
                slice_index: k,
                ..sample(16, 16)
            });
        }
    }
    let split = split_by_patient(&samples, 0.2, 5).unwrap();
    let (train, test) = split.partition(&samples, |s| &s.patient_id);
    assert_eq!(test.len(), 10);
    assert_eq!(train.len(), 40);
    let test_ids: BTreeSet<&str> = test.iter().map(|s| s.patient_id.as_str()).collect();
    assert!(train.iter().all(|s| !test_ids.contains(s.patient_id.as_str())));
}

#[test]
fn synthetic_dataset_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let rows = generate_synthetic(3, 42, dir.path()).unwrap();
    assert_eq!(rows.len(), 15);
    let loaded = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 15);
    for (row, s) in rows.iter().zip(&loaded) {
        assert_eq!(row.patient_id, s.patient_id);
        assert_eq!(row.slice_index, s.slice_index);
        assert!(s.mask.is_binary() && s.mask.area() > 0);
        let (lo, hi) = s
            .image
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0 && hi > lo);
    }
    let files = dataset_files(dir.path(), &rows);
    assert_eq!(files.len(), 31);

    let other = tempfile::tempdir().unwrap();
    generate_synthetic(3, 42, other.path()).unwrap();
    for f in &files {
        let rel = f.strip_prefix(dir.path()).unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(other.path().join(rel)).unwrap());
    }
}

#[test]
fn loader_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = generate_synthetic(2, 1, dir.path()).unwrap();
    rows[1].slice_index = 0;
    let bad = dir.path().join("dup.csv");
    write_manifest(&bad, &rows).unwrap();
    assert!(load_dataset(dir.path(), &bad).is_err());

    rows[1].slice_index = 1;
    rows[0].image_path = "missing.png".into();
    write_manifest(&bad, &rows).unwrap();
    assert!(load_dataset(dir.path(), &bad).is_err());
}

#[test]
fn empty_manifest_loads_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    write_manifest(&manifest, &[]).unwrap();
    assert!(load_dataset(dir.path(), &manifest).unwrap().is_empty());
}

#[test]
fn masks_are_binarized_and_grey_levels_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rows = generate_synthetic(2, 3, dir.path()).unwrap();
    let loaded = load_dataset_dir(dir.path()).unwrap();
    assert!(loaded.iter().all(|s| s.mask.is_binary()));

    let grey = image::GrayImage::from_fn(16, 16, |x, _| image::Luma([[0u8, 128, 255][x as usize % 3]]));
    grey.save(dir.path().join(&rows[0].mask_path)).unwrap();
    image::GrayImage::new(16, 16).save(dir.path().join(&rows[0].image_path)).unwrap();
    assert!(matches!(load_dataset_dir(dir.path()), Err(planet_core::Error::Validation(_))));
}

#[test]
fn sixth_slice_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = generate_synthetic(2, 5, dir.path()).unwrap();
    rows[4].slice_index = 5;
    let manifest = dir.path().join("six.csv");
    write_manifest(&manifest, &rows).unwrap();
    assert!(matches!(load_dataset(dir.path(), &manifest), Err(planet_core::Error::Validation(_))));
}

#[test]
fn generated_masks_are_nonempty_with_one_or_two_components() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut seen = BTreeSet::new();
    let mut smallest = f64::MAX;
    for _ in 0..200 {
        for slice in synthesize_patient(&mut rng) {
            let fraction = slice.mask.area() as f64 / slice.mask.len() as f64;
            smallest = smallest.min(fraction);
            assert!(fraction >= 0.01, "foreground fraction {fraction}");
            assert!((1..=2).contains(&slice.n_components));
            seen.insert(slice.n_components);
        }
    }
    assert_eq!(seen, BTreeSet::from([1, 2]), "smallest fraction {smallest}");
}

#[test]
fn manifest_records_component_counts() {
    let dir = tempfile::tempdir().unwrap();
    let rows = generate_synthetic(4, 8, dir.path()).unwrap();
    let loaded = load_dataset_dir(dir.path()).unwrap();
    for (row, s) in rows.iter().zip(&loaded) {
        let counted = planet_core::objectives::count_cc(&s.mask, planet_core::objectives::Connectivity::Eight);
        assert_eq!(row.n_components, Some(counted));
    }
}

#[test]
fn loaded_masks_equal_generated_masks() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(3, 19, dir.path()).unwrap();
    let loaded = load_dataset_dir(dir.path()).unwrap();
    let mut master = rand_chacha::ChaCha8Rng::seed_from_u64(19);
    let regenerated: Vec<BinMask> = (0..3)
        .flat_map(|_| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master.gen());
            synthesize_patient(&mut rng).into_iter().map(|s| s.mask)
        })
        .collect();
    assert_eq!(loaded.len(), regenerated.len());
    for (s, m) in loaded.iter().zip(&regenerated) {
        assert_eq!(&s.mask, m);
    }
}
