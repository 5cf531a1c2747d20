mod common;

use common::oracle::{self, Act};
use lesionscreen_core::dataset::synthetic_lesion;
use lesionscreen_core::engine::{
    activation_gradient, cam_layer, classifier_head_model, export_reference_model, forward,
    grad_cam, grad_cam_tensor, predict, reference_model, softmax, Dense, EngineError, Layer,
    ModelGraph, Normalization, Tensor, DEFAULT_THRESHOLD,
};
use lesionscreen_core::label::Label;
use lesionscreen_core::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

#[test]
fn randomized_graphs_match_direct_evaluation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = oracle::random_graph(&mut rng);
        let x = oracle::random_input(&mut rng, m.input_side());
        worst = worst.max(oracle::engine_vs_oracle(&m, &x));
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn single_conv_on_5x5_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let conv = lesionscreen_core::engine::Conv2d {
        out_channels: 6,
        in_channels: 3,
        kernel: 3,
        stride: 1,
        pad: 0,
        weight: (0..162).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        bias: (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    };
    let m = ModelGraph::new(
        vec![Layer::Conv2d(conv), Layer::GlobalAvgPool],
        Label::names(),
        5,
        Normalization::default(),
    )
    .unwrap();
    let x = oracle::random_input(&mut rng, 5);
    assert!(oracle::engine_vs_oracle(&m, &x) <= 1e-5);
}

#[test]
fn predict_matches_reimplementation() {
    let m = reference_model(2);
    let img = synthetic_lesion(5, Label::Mpox, 64);
    let p = predict(&m, &img, DEFAULT_THRESHOLD).unwrap();
    let x = Act {
        shape: vec![1, 3, 64, 64],
        data: oracle::normalize(img.pixels(), m.normalization()),
    };
    let probs = oracle::run(m.layers(), &x).last().unwrap().data.clone();
    let oracle_probs = oracle::apply(
        &Layer::Softmax,
        &Act {
            shape: vec![1, 6],
            data: probs,
        },
    )
    .data;
    for (a, b) in p.probabilities.iter().zip(&oracle_probs) {
        assert!((a - b).abs() <= 1e-5);
    }
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
}

fn golden_input() -> (ModelGraph, Tensor) {
    let m = reference_model(0);
    let x = m.preprocess(&synthetic_lesion(0, Label::Mpox, 64)).unwrap();
    (m, x)
}

#[test]
fn reference_logits_match_golden_file() {
    let (m, x) = golden_input();
    let path = fixture("reference_seed0_logits.txt");
    if std::env::var_os("LESIONSCREEN_REGEN_GOLDEN").is_some() {
        let acts = oracle::run(m.layers(), &Act::from_tensor(&x));
        let text: String = acts
            .last()
            .unwrap()
            .data
            .iter()
            .map(|v| format!("{v:.12e}\n"))
            .collect();
        std::fs::write(&path, text).unwrap();
    }
    let golden: Vec<f64> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(golden.len(), 6);
    let logits = forward(&m, &x).unwrap().logits;
    assert!(logits.is_finite());
    assert!(oracle::max_abs_diff(logits.data(), &golden) <= 1e-5);
}

#[test]
fn reference_file_round_trips_and_loads() {
    let bytes = export_reference_model(0);
    assert_eq!(bytes, export_reference_model(0));
    let m = ModelGraph::load(&bytes).unwrap();
    assert_eq!(m.to_bytes(), bytes);
    assert_eq!(m.logit_layers(), 8);
    assert_eq!(m.shape_after(m.logit_layers() - 1), &[1, 6]);
    assert_eq!(m.model_id().len(), 64);
    assert_ne!(m.model_id(), reference_model(1).model_id());
}

#[test]
fn dense_fed_seven_inputs_is_shape_mismatch() {
    let dense = |i: usize, o: usize| {
        Layer::Dense(Dense {
            in_features: i,
            out_features: o,
            weight: vec![0.0; i * o],
            bias: vec![0.0; o],
        })
    };
    let err = ModelGraph::new(
        vec![Layer::Flatten, dense(3, 7), dense(6, 6)],
        Label::names(),
        1,
        Normalization::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::ShapeMismatch(_)), "{err:?}");
}

#[test]
fn classifier_head_forwards_to_six_probabilities() {
    let m = classifier_head_model(1);
    let bytes = m.to_bytes();
    let loaded = ModelGraph::load(&bytes).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    let widths: Vec<usize> = loaded
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(d.out_features),
            _ => None,
        })
        .collect();
    assert_eq!(widths, [4096, 1072, 256, 6]);
    let rates: Vec<f32> = loaded
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dropout { rate } => Some(*rate),
            _ => None,
        })
        .collect();
    assert_eq!(rates, [0.3, 0.2, 0.15]);
    let p = predict(&loaded, &Raster::filled(8, 8, [120, 90, 80]), 0.5).unwrap();
    assert_eq!(p.probabilities.len(), 6);
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
}

#[test]
fn dropout_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = classifier_head_model(0);
    let x = oracle::random_input(&mut rng, 8);
    let pass = forward(&m, &x).unwrap();
    for (i, l) in m.layers().iter().enumerate() {
        if matches!(l, Layer::Dropout { .. }) {
            assert_eq!(pass.activations[i], pass.activations[i - 1]);
        }
    }
}

fn nonzero(g: &[f32]) -> Vec<usize> {
    g.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn grad_cam_gradients_match_finite_differences_on_reference_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let m = reference_model(seed);
        let x = oracle::random_input(&mut rng, 64);
        let target = rng.random_range(0..6);
        let pass = forward(&m, &x).unwrap();
        let at = cam_layer(&m).unwrap();
        assert_eq!(at, 4);
        let g = activation_gradient(&m, &pass, at, target).unwrap();
        let a = &pass.activations[at];
        let entries = oracle::sample_entries(&mut rng, a.len(), &nonzero(&g), 200);
        let s = oracle::finite_difference_check(&m, at, a, &g, target, &entries);
        worst = worst.max(s.max_rel_err);
        checked += s.checked;
        let cam = grad_cam_tensor(&m, &x, target).unwrap();
        assert_eq!((cam.heatmap.width, cam.heatmap.height), (64, 64));
        assert!(cam.heatmap.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(checked > 3000, "only {checked} points away from kinks");
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn grad_cam_gradients_match_finite_differences_on_random_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let m = oracle::random_graph(&mut rng);
        let x = oracle::random_input(&mut rng, m.input_side());
        let target = rng.random_range(0..6);
        let pass = forward(&m, &x).unwrap();
        let at = cam_layer(&m).unwrap();
        let g = activation_gradient(&m, &pass, at, target).unwrap();
        let a = &pass.activations[at];
        let entries: Vec<usize> = (0..a.len()).collect();
        let s = oracle::finite_difference_check(&m, at, a, &g, target, &entries);
        worst = worst.max(s.max_rel_err);
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn grad_cam_on_raster_is_model_input_sized() {
    let m = reference_model(9);
    let h = grad_cam(&m, &synthetic_lesion(1, Label::Cowpox, 100), 0).unwrap();
    assert_eq!(h.values.len(), 64 * 64);
    let overlay = h.overlay_red(
        &lesionscreen_core::imaging::crop_resize(&synthetic_lesion(1, Label::Cowpox, 100), 64)
            .unwrap(),
        0.5,
    );
    assert!(overlay.is_ok());
}

#[test]
fn softmax_of_logits_is_shift_invariant_on_engine_output() {
    let (m, x) = golden_input();
    let logits = forward(&m, &x).unwrap().logits.into_data();
    let shifted: Vec<f32> = logits.iter().map(|v| v + 17.0).collect();
    for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-5);
    }
}
