//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt on every forward pass. Each operation appends a
//! [`TapeNode`] holding its output value, the handles of its inputs and
//! whatever context its backward rule needs. Inputs always precede their
//! consumers, so walking the node list backwards is a valid reverse
//! topological order.
//!
//! ```
//! use leafkit::autodiff::Tape;
//! use leafkit::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use rayon::prelude::*;

use crate::error::{LeafError, Result};
use crate::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Sum,
    Mean,
    Reshape,
    Conv2d,
    MaxPool2d,
    ToSequence,
    Concat,
    TimeStep,
    SoftmaxCrossEntropy,
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(LeafError::shape("convolution stride must be >= 1"));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(LeafError::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    ToSequence { x: Var },
    Concat { parts: Vec<Var> },
    TimeStep { x: Var, t: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::ToSequence { .. } => OpKind::ToSequence,
            Op::Concat { .. } => OpKind::Concat,
            Op::TimeStep { .. } => OpKind::TimeStep,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Scale { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Relu { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::MaxPool2d { x, .. }
            | Op::ToSequence { x }
            | Op::TimeStep { x, .. } => vec![*x],
            Op::Concat { parts } => parts.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// One recorded operation: its output value, inputs and saved backward context.
#[derive(Debug, Clone)]
pub struct TapeNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl TapeNode {
    pub fn op_kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn inputs(&self) -> Vec<Var> {
        self.op.inputs()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    grads: Vec<Option<Vec<f32>>>,
}

/// How `b` is expanded against `a` in a binary elementwise op.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` repeats every `period` elements of `a`.
    Trailing(usize),
}

fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let blen: usize = b.iter().product();
    if blen == 1 {
        return Ok(Broadcast::Trailing(1));
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Broadcast::Trailing(blen));
    }
    Err(LeafError::shape(format!("cannot broadcast {b:?} against {a:?}")))
}

fn reduce_broadcast(g: &[f32], rule: Broadcast) -> Vec<f32> {
    match rule {
        Broadcast::Same => g.to_vec(),
        Broadcast::Trailing(period) => {
            let mut acc = vec![0.0f64; period];
            for chunk in g.chunks(period) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    }
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C·kh·kw, Ho·Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = ho * wo;
    let mut cols = vec![0.0f32; c * kh * kw * p];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image, summing overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last loss(es) w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient recorded for `v` into `target`'s gradient buffer.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(TapeNode { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf. Gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that always tracks gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone().with_requires_grad(true), Op::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(LeafError::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    /// `x·wᵀ + b` with `x: [B,I]`, `w: [O,I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(LeafError::shape(format!("linear input {sx:?} with weight {sw:?}")));
        }
        let (batch, inp, out_dim) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(LeafError::shape(format!(
                    "linear bias {:?}, expected [{out_dim}]",
                    self.shape(b)
                )));
            }
        }
        let mut out = gemm::matmul_nt(self.value(x).data(), self.value(w).data(), batch, inp, out_dim);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let t = Tensor::from_vec(&[batch, out_dim], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let rule = broadcast_rule(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f32> = match rule {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Trailing(p) => {
                av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % p])).collect()
            }
        };
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let t = self.map(x, |v| v * factor);
        self.push(t, Op::Scale { x, factor })
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(x);
        Tensor::from_vec(v.shape(), v.data().iter().map(|&e| f(e)).collect())
            .expect("shape preserved")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::tanh);
        self.push(t, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum_f64(self.value(x).data()) as f32;
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let s = (sum_f64(v) / v.len() as f64) as f32;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [O,C,kh,kw]` plus bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(LeafError::shape(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        let (batch, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kc != c {
            return Err(LeafError::shape(format!("conv2d expects {kc} channels, got {c}")));
        }
        if self.shape(b) != [o] {
            return Err(LeafError::shape(format!("conv2d bias {:?}, expected [{o}]", self.shape(b))));
        }
        let (ho, wo) = geom.output_dims(h, wd, kh, kw)?;
        let p = ho * wo;
        let ckk = c * kh * kw;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0f32; batch * o * p];
        out.par_chunks_mut(o * p).enumerate().for_each(|(bi, dst)| {
            let img = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
            let cols = im2col(img, c, h, wd, kh, kw, geom, ho, wo);
            let mut acc = vec![0.0f64; o * p];
            gemm::gemm_acc(wdata, &cols, o, ckk, p, &mut acc);
            for (oc, row) in acc.chunks(p).enumerate() {
                let bv = bias[oc] as f64;
                for (d, &v) in dst[oc * p..(oc + 1) * p].iter_mut().zip(row) {
                    *d = (v + bv) as f32;
                }
            }
        });
        let t = Tensor::from_vec(&[batch, o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Max pooling with a square `window` and `stride`; ties resolve to the
    /// first element in row-major scan order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(LeafError::shape(format!("maxpool2d input {s:?}")));
        }
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(LeafError::shape(format!(
                "pool window {window} stride {stride} on {h}x{w} map"
            )));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * c * ho * wo);
        let mut argmax = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let t = Tensor::from_vec(&[batch, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }))
    }

    /// `[B,C,H,W] → [B,H,W·C]`; see [`crate::layers::sequence_reshape`].
    pub fn to_sequence(&mut self, x: Var) -> Result<Var> {
        let t = crate::layers::sequence_reshape(self.value(x))?;
        Ok(self.push(t, Op::ToSequence { x }))
    }

    /// Concatenates 2-D tensors `[B, n_i]` along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LeafError::shape("concat of zero tensors"));
        }
        let batch = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != batch {
                return Err(LeafError::shape(format!("concat part {s:?} with batch {batch}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wdt..(r + 1) * wdt]);
            }
        }
        let t = Tensor::from_vec(&[batch, total], out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    /// Slice `x[:, t, :]` of a `[B,T,F]` sequence.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(LeafError::shape(format!("time step {t} of {s:?}")));
        }
        let (batch, steps, f) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * f);
        for b in 0..batch {
            let off = (b * steps + t) * f;
            out.extend_from_slice(&xd[off..off + f]);
        }
        let v = Tensor::from_vec(&[batch, f], out)?;
        Ok(self.push(v, Op::TimeStep { x, t }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(LeafError::shape(format!(
                "logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(LeafError::Label { label: bad, classes: k });
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(batch * k);
        let mut total = 0.0f64;
        for (row, &label) in ld.chunks(k).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() - (row[label] as f64 - max);
            probs.extend(exps.iter().map(|e| (e / z) as f32));
        }
        let loss = Tensor::scalar((total / batch as f64) as f32);
        Ok(self.push(
            loss,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Hash of every ReLU on/off decision and max-pool argmax on the tape.
    /// Two evaluations with equal signatures took the same piecewise-linear
    /// branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for chunk in self.value(*x).data().chunks(64) {
                        let mut bits = 0u64;
                        for (i, &v) in chunk.iter().enumerate() {
                            if v > 0.0 {
                                bits |= 1 << i;
                            }
                        }
                        mix(bits);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are added to any already stored on this tape, so calling
    /// `backward` twice doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(LeafError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            #[cfg(debug_assertions)]
            for inp in self.nodes[id].op.inputs() {
                debug_assert!(inp.0 < id, "tape order violated: {} consumes {}", id, inp.0);
            }
            self.propagate(id, &g, &mut adj)?;
            match &mut self.grads[id] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clears all stored gradients.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&self, id: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Vec<f32>| {
            debug_assert_eq!(contrib.len(), self.value(v).len());
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    send(*a, gemm::matmul_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    send(*b, gemm::matmul_tn(self.value(*a).data(), g, k, m, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, inp, out_dim) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    send(*x, gemm::matmul(g, self.value(*w).data(), batch, out_dim, inp));
                }
                if self.needs(*w) {
                    send(*w, gemm::matmul_tn(g, self.value(*x).data(), out_dim, batch, inp));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        send(*b, reduce_broadcast(g, Broadcast::Trailing(out_dim)));
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let rule = broadcast_rule(self.shape(*a), self.shape(*b))?;
                if self.needs(*a) {
                    send(*a, g.to_vec());
                }
                if self.needs(*b) {
                    let mut gb = reduce_broadcast(g, rule);
                    if matches!(node.op, Op::Sub { .. }) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
            }
            Op::Mul { a, b } => {
                let rule = broadcast_rule(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let period = match rule {
                    Broadcast::Same => bv.len(),
                    Broadcast::Trailing(p) => p,
                };
                if self.needs(*a) {
                    send(*a, g.iter().enumerate().map(|(i, &gi)| gi * bv[i % period]).collect());
                }
                if self.needs(*b) {
                    let prod: Vec<f32> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    send(*b, reduce_broadcast(&prod, rule));
                }
            }
            Op::Scale { x, factor } => send(*x, g.iter().map(|&v| v * factor).collect()),
            Op::Sigmoid { x } => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(&gi, &s)| gi * s * (1.0 - s)).collect());
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(&gi, &t)| gi * (1.0 - t * t)).collect());
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 }).collect());
            }
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                send(*x, vec![(g[0] as f64 / n as f64) as f32; n]);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (batch, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = geom.output_dims(h, wd, kh, kw)?;
                let p = ho * wo;
                let ckk = c * kh * kw;
                if self.needs(*b) {
                    let mut db = vec![0.0f64; o];
                    for sample in g.chunks(o * p) {
                        for (oc, row) in sample.chunks(p).enumerate() {
                            db[oc] += sum_f64(row);
                        }
                    }
                    send(*b, db.into_iter().map(|v| v as f32).collect());
                }
                let xd = self.value(*x).data();
                if self.needs(*w) {
                    let partials: Vec<Vec<f64>> = (0..batch)
                        .into_par_iter()
                        .map(|bi| {
                            let img = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
                            let cols = im2col(img, c, h, wd, kh, kw, *geom, ho, wo);
                            let rows = gemm::transpose(&cols, ckk, p);
                            let mut acc = vec![0.0f64; o * ckk];
                            gemm::gemm_acc(&g[bi * o * p..(bi + 1) * o * p], &rows, o, p, ckk, &mut acc);
                            acc
                        })
                        .collect();
                    let mut dw = vec![0.0f64; o * ckk];
                    for part in &partials {
                        dw.iter_mut().zip(part).for_each(|(a, v)| *a += v);
                    }
                    send(*w, dw.into_iter().map(|v| v as f32).collect());
                }
                if self.needs(*x) {
                    let wt = gemm::transpose(self.value(*w).data(), o, ckk);
                    let mut dx = vec![0.0f32; xd.len()];
                    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(bi, dst)| {
                        let dcols = gemm::matmul(&wt, &g[bi * o * p..(bi + 1) * o * p], ckk, o, p);
                        col2im(&dcols, c, h, wd, kh, kw, *geom, ho, wo, dst);
                    });
                    send(*x, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(*x).len()];
                for (&gi, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += gi;
                }
                send(*x, dx);
            }
            Op::ToSequence { x } => {
                let s = self.shape(*x);
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                send(*x, crate::layers::sequence_unreshape(&gt, s[1])?.into_data());
            }
            Op::Concat { parts } => {
                let batch = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wdt = self.shape(p)[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(batch * wdt);
                        for r in 0..batch {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + wdt]);
                        }
                        send(p, gp);
                    }
                    offset += wdt;
                }
            }
            Op::TimeStep { x, t } => {
                let s = self.shape(*x);
                let (batch, steps, f) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0f32; batch * steps * f];
                for b in 0..batch {
                    let off = (b * steps + t) * f;
                    dx[off..off + f].copy_from_slice(&g[b * f..(b + 1) * f]);
                }
                send(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, d);
            }
        }
        Ok(())
    }
}
