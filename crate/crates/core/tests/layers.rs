mod common;

use common::{library_step, max_diff, to_f32, ScalarLstm};
use leafkit::autodiff::Tape;
use leafkit::layers::{
    lstm_forward, sequence_reshape, sequence_unreshape, Architecture, LstmParams, Model, ModelSpec,
};
use leafkit::Tensor;
use proptest::prelude::*;

#[test]
fn lstm_step_matches_scalar_equations() {
    let cell = ScalarLstm::fixture();
    let p = cell.params();
    for (x, h, c) in [
        (vec![0.5, -0.3, 0.8], vec![0.0, 0.0], vec![0.0, 0.0]),
        (vec![-1.2, 0.4, 0.1], vec![0.3, -0.6], vec![0.9, -0.4]),
    ] {
        let (want_h, want_c) = cell.step(&x, &h, &c);
        let (got_h, got_c) = library_step(&p, &x, &h, &c);
        assert!(max_diff(&got_h, &want_h) < 1e-6, "{got_h:?} vs {want_h:?}");
        assert!(max_diff(&got_c, &want_c) < 1e-6, "{got_c:?} vs {want_c:?}");
    }
}

#[test]
fn lstm_forward_matches_scalar_unroll() {
    let cell = ScalarLstm::fixture();
    let xs = [[0.2, -0.1, 0.4], [0.7, 0.3, -0.5], [-0.6, 0.9, 0.0], [0.1, 0.1, 0.1]];
    let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
    for x in &xs {
        (h, c) = cell.step(x, &h, &c);
    }
    let mut tape = Tape::new();
    let vars = cell.params().register(&mut tape);
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let seq = tape.constant(Tensor::from_vec(&[1, 4, 3], to_f32(&flat)).unwrap());
    let out = lstm_forward(&mut tape, seq, &vars).unwrap();
    assert!(max_diff(tape.value(out).data(), &h) < 1e-6);
}

#[test]
fn saturated_forget_gate_keeps_memory() {
    // zero weights, b_f = 30: f = σ(30) ≈ 1 - 9.4e-14, i = 0.5, c' = 0
    let mut p = LstmParams::zeros(3, 2).unwrap();
    p.b_f = Tensor::from_vec(&[2], vec![30.0, 30.0]).unwrap();
    let c_prev = [0.75, -1.5];
    let (h, c) = library_step(&p, &[0.3, -0.2, 0.9], &[0.1, 0.4], &c_prev);
    assert!(max_diff(&c, &c_prev) < 1e-6, "{c:?}");
    let want_h: Vec<f64> = c_prev.iter().map(|v| v.tanh() * 0.5).collect();
    assert!(max_diff(&h, &want_h) < 1e-6);
}

#[test]
fn batch_rows_are_independent() {
    let cell = ScalarLstm::fixture();
    let mut tape = Tape::new();
    let vars = cell.params().register(&mut tape);
    let a = [0.2, -0.4, 0.6, 0.1, 0.0, -0.3];
    let b = [-0.7, 0.5, 0.2, 0.9, -0.1, 0.4];
    let seq = tape.constant(Tensor::from_vec(&[2, 2, 3], to_f32(&[a, b].concat())).unwrap());
    let h_t = lstm_forward(&mut tape, seq, &vars).unwrap();
    let out = tape.value(h_t).clone();
    for (row, xs) in [a, b].iter().enumerate() {
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for x in xs.chunks(3) {
            (h, c) = cell.step(x, &h, &c);
        }
        assert!(max_diff(&out.data()[row * 2..row * 2 + 2], &h) < 1e-6);
    }
}

#[test]
fn hybrid_is_much_smaller_than_baseline() {
    let base = ModelSpec::baseline(128).unwrap().param_count();
    let hybrid = ModelSpec::hybrid(128).unwrap().param_count();
    assert!((hybrid as f64) < 0.4 * base as f64, "{hybrid} vs {base}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let x = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
    for arch in Architecture::ALL {
        let spec = ModelSpec::for_architecture(arch, 16).unwrap();
        let a = Model::build(spec.clone(), 8).unwrap().predict_logits(&x).unwrap();
        let b = Model::build(spec, 8).unwrap().predict_logits(&x).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

proptest! {
    #[test]
    fn sequence_reshape_inverts(b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
        let n = b * c * h * w;
        let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) as f32).collect();
        let x = Tensor::from_vec(&[b, c, h, w], data).unwrap();
        let s = sequence_reshape(&x).unwrap();
        prop_assert_eq!(s.shape(), &[b, h, w * c]);
        prop_assert_eq!(sequence_unreshape(&s, c).unwrap(), x);
    }

    #[test]
    fn zero_lstm_outputs_zero(t in 1usize..5, f in 1usize..4, hidden in 1usize..5, v in -3.0f32..3.0) {
        let p = LstmParams::zeros(f, hidden).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let seq = tape.constant(Tensor::full(&[1, t, f], v).unwrap());
        let out = lstm_forward(&mut tape, seq, &vars).unwrap();
        prop_assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }
}
