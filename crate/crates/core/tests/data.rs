use std::fs;
use std::path::Path;

use leafkit::data::{
    augment_brightness, augment_combination, augment_crop, augment_flip, augment_rotate, build_augmented_set,
    crop_resize, load_and_split, sample_plan, AugmentOp, AugmentationKind, Axis, DatasetManifest, ImageF32, Label,
    LoadedSplit, Origin, Split,
};
use leafkit::LeafError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn noise(w: usize, h: usize, seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageF32::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

/// Writes `counts[k]` small PNGs into `root/<class k>/`.
fn write_corpus(root: &Path, counts: [usize; 3], size: usize) {
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        fs::create_dir_all(&dir).unwrap();
        for i in 0..counts[label.index()] {
            noise(size, size, (label.index() * 100_000 + i) as u64)
                .save_png(&dir.join(format!("{}_{i:04}.png", label.as_str())))
                .unwrap();
        }
    }
}

fn tree_hash(dir: &Path) -> String {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() { out.extend(walk(&p)) } else { out.push(p) }
    }
    out
}

#[test]
fn ten_per_class_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), [10, 10, 10], 4);
    let m = load_and_split(dir.path(), 3).unwrap();
    assert_eq!(m.class_counts(Split::Train), [6, 7, 7]);
    assert_eq!(m.class_counts(Split::Val), [2, 2, 1]);
    assert_eq!(m.class_counts(Split::Test), [2, 1, 2]);
    assert!(m.skipped.is_empty());
    assert!(m.records.iter().all(|s| s.image_path.is_absolute() && s.origin == Origin::Original));
}

#[test]
fn split_is_deterministic_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), [12, 9, 11], 4);
    let a = load_and_split(dir.path(), 5).unwrap();
    let b = load_and_split(dir.path(), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_tsv(None).unwrap(), b.to_tsv(None).unwrap());
    let c = load_and_split(dir.path(), 6).unwrap();
    let val = |m: &DatasetManifest| m.split(Split::Val).map(|s| s.image_path.clone()).collect::<Vec<_>>();
    assert_ne!(val(&a), val(&c));
}

#[test]
fn split_errors_and_skip_report() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), [3, 3, 0], 4);
    fs::remove_dir(dir.path().join("healthy")).unwrap();
    match load_and_split(dir.path(), 1) {
        Err(LeafError::Dataset(msg)) => assert!(msg.contains("healthy"), "{msg}"),
        other => panic!("{other:?}"),
    }
    fs::create_dir(dir.path().join("healthy")).unwrap();
    fs::write(dir.path().join("healthy/broken.png"), b"not a png").unwrap();
    fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let m = load_and_split(dir.path(), 1).unwrap();
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].path.ends_with("healthy/broken.png"));
    assert_eq!(m.records.len(), 6);
    assert!(matches!(load_and_split(&dir.path().join("nope"), 1), Err(LeafError::Config(_))));
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path().join("corpus").as_path(), [4, 4, 4], 4);
    let m = load_and_split(&dir.path().join("corpus"), 9).unwrap();
    let path = dir.path().join("out/manifest.tsv");
    m.write(&path).unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.seed, 9);
}

#[test]
fn augmented_set_counts_provenance_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, [10, 10, 10], 12);
    let m = load_and_split(&corpus, 2).unwrap();
    for kind in AugmentationKind::ALL {
        let out = dir.path().join(kind.as_str());
        let (set, stats) = build_augmented_set(&m, kind, 11, &out, 8).unwrap();
        let train = m.class_counts(Split::Train);
        assert_eq!(set.class_counts(Split::Train), train.map(|c| 3 * c));
        assert_eq!(set.class_counts(Split::Val), m.class_counts(Split::Val));
        assert_eq!(set.class_counts(Split::Test), m.class_counts(Split::Test));
        set.validate().unwrap();
        assert_eq!(stats.generated, 40);
        for s in set.records.iter().filter(|s| s.origin != Origin::Original) {
            let Origin::Augmented { kind: k, source } = &s.origin else { unreachable!() };
            assert_eq!(*k, kind);
            assert!(m.split(Split::Train).any(|o| &o.id() == source && o.label == s.label));
            let img = ImageF32::load(&s.image_path, None).unwrap();
            assert_eq!((img.width(), img.height()), (8, 8));
        }
        let reread = DatasetManifest::read(&out.join("manifest.tsv")).unwrap();
        assert_eq!(reread.records, set.records);
        let first = tree_hash(&out);
        build_augmented_set(&m, kind, 11, &out, 8).unwrap();
        assert_eq!(tree_hash(&out), first, "{kind} regeneration differs");
    }
}

#[test]
fn augmenting_twice_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("c"), [4, 4, 4], 4);
    let m = load_and_split(&dir.path().join("c"), 2).unwrap();
    let (set, _) = build_augmented_set(&m, AugmentationKind::Flip, 1, &dir.path().join("flip"), 4).unwrap();
    assert!(matches!(
        build_augmented_set(&set, AugmentationKind::Flip, 1, &dir.path().join("again"), 4),
        Err(LeafError::Dataset(_))
    ));
}

#[test]
fn pixel_cache_reproduces_decoded_split() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("c"), [3, 3, 3], 10);
    let m = load_and_split(&dir.path().join("c"), 2).unwrap();
    let plain = LoadedSplit::from_manifest(&m, Split::Train, 6).unwrap();
    std::env::set_var(leafkit::data::CACHE_ENV, dir.path().join("cache"));
    let cold = LoadedSplit::from_manifest(&m, Split::Train, 6).unwrap();
    let warm = LoadedSplit::from_manifest(&m, Split::Train, 6).unwrap();
    std::env::remove_var(leafkit::data::CACHE_ENV);
    assert_eq!(cold, plain);
    assert_eq!(warm, plain);
    assert_eq!(fs::read_dir(dir.path().join("cache")).unwrap().count(), 1);
}

fn smooth_disk(size: usize) -> ImageF32 {
    let c = (size as f32 - 1.0) / 2.0;
    ImageF32::from_fn(size, size, |x, y| {
        let r = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
        // small disk in a wide frame, so reflected border samples only see background
        let v = 1.0 / (1.0 + ((r - size as f32 * 0.15) / 3.0).exp());
        [v, 0.5 * v, 1.0 - v]
    })
    .unwrap()
}

#[test]
fn rotating_a_symmetric_disk_is_near_identity() {
    let disk = smooth_disk(128);
    for deg in [2.0, -7.5, 13.0, 30.0, -30.0] {
        let err = augment_rotate(&disk, deg).max_abs_diff(&disk);
        assert!(err < 2.0 / 255.0, "{deg}: {err}");
    }
}

#[test]
fn four_quarter_turns_are_identity() {
    let img = noise(9, 9, 4);
    let mut out = img.clone();
    for _ in 0..4 {
        out = augment_rotate(&out, 90.0);
    }
    assert_eq!(out, img);
    assert_eq!(augment_rotate(&img, 0.0), img);
}

#[test]
fn symmetric_image_survives_horizontal_flip() {
    let img = ImageF32::from_fn(6, 3, |x, y| {
        let d = x.min(5 - x) as f32;
        [d / 5.0, y as f32 / 3.0, 0.5]
    })
    .unwrap();
    assert_eq!(augment_flip(&img, Axis::Horizontal), img);
}

#[test]
fn combination_with_single_flip_equals_flip() {
    let img = noise(7, 5, 8);
    let seed = (0u64..10_000)
        .find(|&s| {
            let plan = sample_plan(AugmentationKind::Combination, &mut ChaCha8Rng::seed_from_u64(s));
            plan.ops.len() == 1 && matches!(plan.ops[0], AugmentOp::Flip { .. })
        })
        .expect("some seed draws the flip-only subset");
    let plan = sample_plan(AugmentationKind::Combination, &mut ChaCha8Rng::seed_from_u64(seed));
    let AugmentOp::Flip { axis } = plan.ops[0] else { unreachable!() };
    assert_eq!(augment_combination(&img, seed).unwrap(), augment_flip(&img, axis));
}

#[test]
fn combination_subsets_are_uniform_and_ordered() {
    let mut seen = std::collections::BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..14_000 {
        let plan = sample_plan(AugmentationKind::Combination, &mut rng);
        let slots: Vec<usize> = plan
            .ops
            .iter()
            .map(|op| match op {
                AugmentOp::Brightness { .. } => 0,
                AugmentOp::Crop { .. } => 1,
                AugmentOp::Flip { .. } => 2,
                AugmentOp::Rotate { .. } => 3,
            })
            .collect();
        assert!((1..=3).contains(&slots.len()));
        assert!(slots.windows(2).all(|w| w[0] < w[1]), "{slots:?}");
        *seen.entry(slots).or_insert(0usize) += 1;
    }
    assert_eq!(seen.len(), 14);
    // each subset expects 1000 draws; 5 standard deviations is about ±150
    assert!(seen.values().all(|&n| (850..=1150).contains(&n)), "{seen:?}");
}

#[test]
fn sampled_parameters_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        for op in sample_plan(AugmentationKind::Combination, &mut rng).ops {
            match op {
                AugmentOp::Brightness { factor } => assert!((1.1..=1.5).contains(&factor)),
                AugmentOp::Crop { fraction, anchor } => {
                    assert!((0.7..=0.9).contains(&fraction));
                    assert!((0.0..=1.0).contains(&anchor.0) && (0.0..=1.0).contains(&anchor.1));
                }
                AugmentOp::Flip { .. } => {}
                AugmentOp::Rotate { degrees } => assert!((2.0..=30.0).contains(&degrees.abs())),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ops_preserve_dims_and_range(seed in 0u64..1000, w in 1usize..20, h in 1usize..20,
                                   factor in 1.1f32..=1.5, fraction in 0.7f32..=0.9,
                                   ax in 0.0f32..=1.0, ay in 0.0f32..=1.0, deg in -30.0f32..30.0) {
        let img = noise(w, h, seed);
        let outs = [
            augment_brightness(&img, factor).unwrap(),
            augment_crop(&img, fraction, (ax, ay)).unwrap(),
            augment_flip(&img, Axis::Vertical),
            augment_rotate(&img, deg),
            augment_combination(&img, seed).unwrap(),
        ];
        for out in outs {
            prop_assert_eq!((out.width(), out.height()), (w, h));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flip_is_an_involution(seed in 0u64..1000, w in 1usize..12, h in 1usize..12, vertical in any::<bool>()) {
        let img = noise(w, h, seed);
        let axis = if vertical { Axis::Vertical } else { Axis::Horizontal };
        prop_assert_eq!(augment_flip(&augment_flip(&img, axis), axis), img);
    }

    #[test]
    fn crop_of_constant_is_constant(v in 0.0f32..=1.0, fraction in 0.7f32..=0.9, ax in 0.0f32..=1.0) {
        let img = ImageF32::filled(11, 8, [v, v, v]).unwrap();
        let out = augment_crop(&img, fraction, (ax, 1.0 - ax)).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-6);
        prop_assert_eq!(crop_resize(&img, 1.0, (ax, ax)).unwrap(), img);
    }

    #[test]
    fn combination_is_deterministic(seed in any::<u64>()) {
        let img = noise(6, 6, 3);
        prop_assert_eq!(augment_combination(&img, seed).unwrap(), augment_combination(&img, seed).unwrap());
    }
}
