use leafkit::autodiff::{ConvGeometry, Tape};
use leafkit::data::ImageF32;
use leafkit::explain::{gradcam, gradcam_on_tape, last_conv_layer, render_overlay, save_overlay, viridis, Heatmap};
use leafkit::layers::{Architecture, Model, ModelSpec};
use leafkit::{LeafError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(size: usize, seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageF32::new(size, size, (0..size * size * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn model(arch: Architecture, seed: u64) -> Model {
    Model::build(ModelSpec::for_architecture(arch, 16).unwrap(), seed).unwrap()
}

#[test]
fn map_matches_layer_grid() {
    // 16 → conv 16 → pool 8 → conv 8 → pool 4 → stride-2 conv 2 → conv 2
    let expected = [(0, 16), (3, 8), (6, 2), (8, 2)];
    for arch in Architecture::ALL {
        let m = model(arch, 1);
        assert_eq!(m.spec().conv_layers(), vec![0, 3, 6, 8]);
        assert_eq!(last_conv_layer(&m), Some(8));
        for (layer, side) in expected {
            let map = gradcam(&m, &noise(16, 2), 1, layer).unwrap();
            assert_eq!((map.height, map.width, map.values.len()), (side, side, side * side));
            assert_eq!((map.layer, map.class), (layer, 1));
        }
    }
}

#[test]
fn rejects_bad_layer_class_and_size() {
    let m = model(Architecture::BaselineCnn, 0);
    let img = noise(16, 0);
    for layer in [1, 2, 10, 99] {
        assert!(matches!(gradcam(&m, &img, 0, layer), Err(LeafError::Config(_))), "layer {layer}");
    }
    assert!(matches!(gradcam(&m, &img, 3, 0), Err(LeafError::Config(_))));
    assert!(gradcam(&m, &noise(24, 0), 0, 0).is_err());
}

#[test]
fn repeated_calls_agree() {
    let m = model(Architecture::HybridCnnLstm, 5);
    let img = noise(16, 9);
    assert_eq!(gradcam(&m, &img, 2, 8).unwrap(), gradcam(&m, &img, 2, 8).unwrap());
}

/// One 1×1 convolution with two output channels; the score is the mean of
/// channel 0. Its gradient is 1/(H·W) per cell and zero for channel 1, so
/// the map is relu(A0)/(H·W).
#[test]
fn one_by_one_conv_closed_form() {
    let (h, w) = (5usize, 4usize);
    let cells = (h * w) as f64;
    let (a0, b0) = (0.8f64, 0.1f64);
    for constant in [true, false] {
        let input: Vec<f32> =
            (0..h * w).map(|i| if constant { 0.35 } else { (i as f32 * 0.37).sin() }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, h, w], input.clone()).unwrap());
        let wt = tape.param(&Tensor::from_vec(&[2, 1, 1, 1], vec![a0 as f32, -1.3]).unwrap());
        let b = tape.param(&Tensor::from_vec(&[2], vec![b0 as f32, 0.4]).unwrap());
        let act = tape.conv2d(x, wt, b, ConvGeometry { stride: (1, 1), padding: (0, 0) }).unwrap();
        let first = tape.constant(Tensor::from_vec(&[1, 2, h, w], [vec![1.0; h * w], vec![0.0; h * w]].concat()).unwrap());
        let masked = tape.mul(act, first).unwrap();
        let total = tape.sum(masked);
        let score = tape.scale(total, 1.0 / (h * w) as f32);
        let (map, mh, mw) = gradcam_on_tape(&mut tape, act, score).unwrap();
        assert_eq!((mh, mw), (h, w));
        for (got, &x) in map.iter().zip(&input) {
            let want = ((a0 * x as f64 + b0) / cells).max(0.0);
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        if constant {
            let want = (a0 * 0.35 + b0) / cells;
            assert!(map.iter().all(|&v| (v as f64 - want).abs() < 1e-6 && v > 0.0));
        }
    }
}

#[test]
fn alpha_zero_is_identity_and_dims_match() {
    let img = noise(20, 3);
    let heat = Heatmap::new((0..16).map(|i| i as f32).collect(), 4, 4, 0, 0).unwrap();
    let out = render_overlay(&heat, &img, 0.0).unwrap();
    assert_eq!(out, img);
    let half = render_overlay(&heat, &img, 0.5).unwrap();
    assert_eq!((half.width(), half.height()), (20, 20));
    assert!(render_overlay(&heat, &img, 1.5).is_err());
}

#[test]
fn flat_map_renders_darkest_color() {
    let img = noise(9, 4);
    let heat = Heatmap::new(vec![2.5; 6], 2, 3, 0, 0).unwrap();
    let alpha = 0.4;
    let out = render_overlay(&heat, &img, alpha).unwrap();
    let dark = viridis(0.0);
    for (o, i) in out.data().chunks(3).zip(img.data().chunks(3)) {
        for c in 0..3 {
            let want = (1.0 - alpha) * i[c] + alpha * dark[c] as f32 / 255.0;
            assert!((o[c] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn overlay_and_sidecar_written() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Architecture::BaselineCnn, 7);
    let img = noise(16, 1);
    let heat = gradcam(&m, &img, 0, 3).unwrap();
    let path = dir.path().join("out/cam.png");
    let sidecar = save_overlay(&heat, &render_overlay(&heat, &img, 0.5).unwrap(), &path).unwrap();
    assert_eq!(ImageF32::load(&path, None).unwrap().width(), 16);
    let back: Heatmap = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(back, heat);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heatmaps_are_non_negative(seed in any::<u64>(), class in 0usize..3, pick in 0usize..4, hybrid in any::<bool>()) {
        let arch = if hybrid { Architecture::HybridCnnLstm } else { Architecture::BaselineCnn };
        let m = model(arch, seed);
        let layer = m.spec().conv_layers()[pick];
        let map = gradcam(&m, &noise(16, seed ^ 1), class, layer).unwrap();
        prop_assert!(map.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(map.min >= 0.0 && map.min <= map.max);
    }

    #[test]
    fn normalization_preserves_order(values in prop::collection::vec(0.0f32..100.0, 1..40)) {
        let n = values.len();
        let heat = Heatmap::new(values.clone(), 1, n, 0, 0).unwrap();
        let norm = heat.normalized();
        for i in 0..n {
            prop_assert!((0.0..=1.0).contains(&norm[i]));
            for j in 0..n {
                if values[i] < values[j] {
                    prop_assert!(norm[i] <= norm[j]);
                }
            }
        }
    }
}
