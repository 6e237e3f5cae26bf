//! Helpers shared by several integration test targets.
#![allow(dead_code)]

use leafkit::autodiff::Tape;
use leafkit::layers::{lstm_step, LstmParams, LstmState};
use leafkit::Tensor;

/// Gate parameters as plain row-major `f64` arrays: each weight row holds
/// `hidden + input` entries acting on `[h, x]`.
#[derive(Debug, Clone)]
pub struct ScalarLstm {
    pub input: usize,
    pub hidden: usize,
    pub w: [Vec<f64>; 4],
    pub b: [Vec<f64>; 4],
}

const F: usize = 0;
const I: usize = 1;
const C: usize = 2;
const O: usize = 3;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ScalarLstm {
    /// Hidden size 2, input size 3 with small hand-picked values.
    pub fn fixture() -> Self {
        ScalarLstm {
            input: 3,
            hidden: 2,
            w: [
                vec![0.10, -0.20, 0.30, 0.05, -0.10, 0.20, -0.30, 0.25, 0.15, -0.05],
                vec![-0.15, 0.25, -0.05, 0.20, 0.10, 0.30, 0.05, -0.25, 0.10, 0.20],
                vec![0.20, 0.10, -0.25, 0.15, 0.30, -0.10, 0.20, 0.05, -0.15, 0.10],
                vec![0.05, 0.15, 0.10, -0.20, 0.25, 0.10, -0.05, 0.30, 0.20, -0.10],
            ],
            b: [vec![0.10, -0.10], vec![0.05, 0.00], vec![-0.05, 0.10], vec![0.00, 0.20]],
        }
    }

    /// One step of the gate equations, evaluated entry by entry.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.hidden + self.input;
        let pre = |g: usize, j: usize| {
            let row = &self.w[g][j * k..(j + 1) * k];
            let mut z = self.b[g][j];
            for m in 0..self.hidden {
                z += row[m] * h[m];
            }
            for m in 0..self.input {
                z += row[self.hidden + m] * x[m];
            }
            z
        };
        let mut h_next = vec![0.0; self.hidden];
        let mut c_next = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let f = sigmoid(pre(F, j));
            let cand = pre(C, j).tanh();
            let i = sigmoid(pre(I, j));
            c_next[j] = f * c[j] + i * cand;
            let o = sigmoid(pre(O, j));
            h_next[j] = c_next[j].tanh() * o;
        }
        (h_next, c_next)
    }

    pub fn params(&self) -> LstmParams {
        let w = |g: usize| Tensor::from_vec(&[self.hidden, self.hidden + self.input], to_f32(&self.w[g])).unwrap();
        let b = |g: usize| Tensor::from_vec(&[self.hidden], to_f32(&self.b[g])).unwrap();
        LstmParams {
            input_size: self.input,
            hidden_size: self.hidden,
            w_f: w(F),
            b_f: b(F),
            w_i: w(I),
            b_i: b(I),
            w_c: w(C),
            b_c: b(C),
            w_o: w(O),
            b_o: b(O),
        }
    }
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Runs the library cell for one batch-1 step from `(h, c)`.
pub fn library_step(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f32>, Vec<f32>) {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let xv = tape.constant(Tensor::from_vec(&[1, x.len()], to_f32(x)).unwrap());
    let state = LstmState {
        h: tape.constant(Tensor::from_vec(&[1, h.len()], to_f32(h)).unwrap()),
        c: tape.constant(Tensor::from_vec(&[1, c.len()], to_f32(c)).unwrap()),
    };
    let next = lstm_step(&mut tape, xv, state, &vars).unwrap();
    (tape.value(next.h).data().to_vec(), tape.value(next.c).data().to_vec())
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
