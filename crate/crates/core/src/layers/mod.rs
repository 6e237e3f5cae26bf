//! Network building blocks: initialisers, convolution and pooling wrappers,
//! the feature-map-to-sequence reshape and the LSTM cell.

mod model;

pub use model::{
    build_model, Architecture, Forward, HeadWidths, LayerConfig, Model, ModelSpec, NamedParam, DEFAULT_RESOLUTION,
    NUM_CLASSES,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// Kaiming-normal weights: `N(0, 2/fan_in)`.
pub fn he_init<R: Rng + ?Sized>(fan_in: usize, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(LeafError::Parameter("fan_in must be >= 1".into()));
    }
    let n: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| LeafError::Parameter(e.to_string()))?;
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng) as f32).collect())
}

/// Glorot-uniform weights with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| LeafError::Parameter(e.to_string()))?;
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Weights and bias of one 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl Conv2dParams {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

/// Convolution of `x` with freshly registered `params`.
pub fn conv2d(tape: &mut Tape, x: Var, params: &Conv2dParams) -> Result<Var> {
    let w = tape.param(&params.weight);
    let b = tape.param(&params.bias);
    tape.conv2d(x, w, b, params.geometry)
}

pub fn maxpool2d(tape: &mut Tape, x: Var, window: usize, stride: usize) -> Result<Var> {
    tape.maxpool2d(x, window, stride)
}

pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Reads a `[B,C,H,W]` feature map row by row: time step `r` is image row `r`
/// and carries `W·C` features ordered `(w0c0, w0c1, …, w1c0, …)`.
pub fn sequence_reshape(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(LeafError::shape(format!("sequence reshape expects [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[((bi * h + hi) * w + wi) * c + ci] = src[((bi * c + ci) * h + hi) * w + wi];
                }
            }
        }
    }
    Tensor::from_vec(&[b, h, w * c], out)
}

/// Inverse of [`sequence_reshape`] for a map with `channels` channels.
pub fn sequence_unreshape(seq: &Tensor, channels: usize) -> Result<Tensor> {
    let s = seq.shape();
    if s.len() != 3 || channels == 0 || !s[2].is_multiple_of(channels) {
        return Err(LeafError::shape(format!(
            "cannot restore {channels} channels from sequence {s:?}"
        )));
    }
    let (b, h, c) = (s[0], s[1], channels);
    let w = s[2] / c;
    let src = seq.data();
    let mut out = vec![0.0f32; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[((bi * c + ci) * h + hi) * w + wi] = src[((bi * h + hi) * w + wi) * c + ci];
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// Gate weights of an LSTM cell. Every weight is `[hidden, hidden + input]`
/// and multiplies the concatenation `[h_{t-1}, x_t]`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Result<Self> {
        let w = Tensor::zeros(&[hidden_size, hidden_size + input_size])?;
        let b = Tensor::zeros(&[hidden_size])?;
        Ok(LstmParams {
            input_size,
            hidden_size,
            w_f: w.clone(),
            b_f: b.clone(),
            w_i: w.clone(),
            b_i: b.clone(),
            w_c: w.clone(),
            b_c: b.clone(),
            w_o: w,
            b_o: b,
        })
    }

    /// Registers all eight tensors on `tape` in the order f, i, c, o.
    pub fn register(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            w_f: tape.param(&self.w_f),
            b_f: tape.param(&self.b_f),
            w_i: tape.param(&self.w_i),
            b_i: tape.param(&self.b_i),
            w_c: tape.param(&self.w_c),
            b_c: tape.param(&self.b_c),
            w_o: tape.param(&self.w_o),
            b_o: tape.param(&self.b_o),
        }
    }
}

/// LSTM parameters already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_f: Var,
    pub b_f: Var,
    pub w_i: Var,
    pub b_i: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl LstmVars {
    pub fn from_slice(input_size: usize, hidden_size: usize, v: &[Var]) -> Result<Self> {
        if v.len() != 8 {
            return Err(LeafError::Config(format!("LSTM needs 8 parameter tensors, got {}", v.len())));
        }
        Ok(LstmVars {
            input_size,
            hidden_size,
            w_f: v[0],
            b_f: v[1],
            w_i: v[2],
            b_i: v[3],
            w_c: v[4],
            b_c: v[5],
            w_o: v[6],
            b_o: v[7],
        })
    }
}

/// Hidden and cell state, each `[batch, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Result<Self> {
        let h = tape.constant(Tensor::zeros(&[batch, hidden])?);
        let c = tape.constant(Tensor::zeros(&[batch, hidden])?);
        Ok(LstmState { h, c })
    }
}

/// One cell update:
///
/// ```text
/// f  = σ(W_f·[h, x] + b_f)      c' = tanh(W_c·[h, x] + b_c)
/// i  = σ(W_i·[h, x] + b_i)      c_t = f ∗ c + i ∗ c'
/// o  = σ(W_o·[h, x] + b_o)      h_t = tanh(c_t) ∗ o
/// ```
pub fn lstm_step(tape: &mut Tape, x_t: Var, state: LstmState, p: &LstmVars) -> Result<LstmState> {
    let sx = tape.shape(x_t).to_vec();
    if sx.len() != 2 || sx[1] != p.input_size {
        return Err(LeafError::shape(format!(
            "LSTM step input {sx:?}, expected [B, {}]",
            p.input_size
        )));
    }
    let hs = tape.shape(state.h).to_vec();
    if hs != [sx[0], p.hidden_size] || tape.shape(state.c) != hs.as_slice() {
        return Err(LeafError::shape(format!(
            "LSTM state {hs:?} does not match batch {} hidden {}",
            sx[0], p.hidden_size
        )));
    }
    let z = tape.concat(&[state.h, x_t])?;
    let f_pre = tape.linear(z, p.w_f, Some(p.b_f))?;
    let f = tape.sigmoid(f_pre);
    let c_pre = tape.linear(z, p.w_c, Some(p.b_c))?;
    let cand = tape.tanh(c_pre);
    let i_pre = tape.linear(z, p.w_i, Some(p.b_i))?;
    let i = tape.sigmoid(i_pre);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let o_pre = tape.linear(z, p.w_o, Some(p.b_o))?;
    let o = tape.sigmoid(o_pre);
    let c_act = tape.tanh(c);
    let h = tape.mul(c_act, o)?;
    Ok(LstmState { h, c })
}

/// Runs the cell over pre-sliced steps from the zero state and returns `h_T`.
pub fn lstm_unroll(tape: &mut Tape, steps: &[Var], p: &LstmVars) -> Result<Var> {
    let first = *steps.first().ok_or(LeafError::EmptySequence)?;
    let batch = tape.shape(first)[0];
    let mut state = LstmState::zeros(tape, batch, p.hidden_size)?;
    for &x in steps {
        state = lstm_step(tape, x, state, p)?;
    }
    Ok(state.h)
}

/// Runs the cell over a `[B,T,F]` sequence and returns the final hidden state.
pub fn lstm_forward(tape: &mut Tape, seq: Var, p: &LstmVars) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(LeafError::shape(format!("LSTM expects [B,T,F], got {s:?}")));
    }
    let steps = (0..s[1]).map(|t| tape.time_step(seq, t)).collect::<Result<Vec<_>>>()?;
    lstm_unroll(tape, &steps, p)
}
