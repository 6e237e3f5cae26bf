use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, he_init, lstm_forward, LstmVars};
use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    /// Convolutional stack with a flatten + dense head.
    #[serde(rename = "cnn")]
    BaselineCnn,
    /// Same stack, with the map read row-wise by an LSTM.
    #[serde(rename = "cnn-lstm")]
    HybridCnnLstm,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::BaselineCnn, Architecture::HybridCnnLstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::BaselineCnn => "cnn",
            Architecture::HybridCnnLstm => "cnn-lstm",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Architecture::BaselineCnn),
            "cnn-lstm" => Ok(Architecture::HybridCnnLstm),
            other => Err(LeafError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Dense { inputs: usize, outputs: usize },
    SequenceReshape,
    Lstm { input_size: usize, hidden_size: usize },
}

impl LayerConfig {
    /// Parameter tensor names and shapes, in serialization order.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerConfig::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerConfig::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerConfig::Lstm { input_size, hidden_size } => {
                let w = vec![hidden_size, hidden_size + input_size];
                let b = vec![hidden_size];
                vec![
                    ("w_f", w.clone()),
                    ("b_f", b.clone()),
                    ("w_i", w.clone()),
                    ("b_i", b.clone()),
                    ("w_c", w.clone()),
                    ("b_c", b.clone()),
                    ("w_o", w),
                    ("b_o", b),
                ]
            }
            _ => vec![],
        }
    }
}

/// Widths of the two head layers after the convolutional stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadWidths {
    pub first: usize,
    pub second: usize,
}

/// Declarative network description. Both architectures share the
/// convolutional stack and differ only in the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
    pub layers: Vec<LayerConfig>,
}

pub const DEFAULT_RESOLUTION: usize = 128;
pub const NUM_CLASSES: usize = 3;
const CONV_WIDTHS: [usize; 4] = [32, 32, 64, 64];

impl ModelSpec {
    pub fn baseline(resolution: usize) -> Result<Self> {
        Self::for_architecture(Architecture::BaselineCnn, resolution)
    }

    pub fn hybrid(resolution: usize) -> Result<Self> {
        Self::for_architecture(Architecture::HybridCnnLstm, resolution)
    }

    /// Default configuration: dense 64 → 8 for the baseline head, LSTM 64 →
    /// dense 16 for the hybrid head.
    pub fn for_architecture(arch: Architecture, resolution: usize) -> Result<Self> {
        let head = match arch {
            Architecture::BaselineCnn => HeadWidths { first: 64, second: 8 },
            Architecture::HybridCnnLstm => HeadWidths { first: 64, second: 16 },
        };
        Self::custom(arch, resolution, CONV_WIDTHS, head)
    }

    /// `conv3×3→relu→pool2`, `conv3×3→relu→pool2`, `conv3×3 stride 2→relu`,
    /// `conv3×3→relu`, then the architecture's head. `resolution` must be a
    /// multiple of 8.
    pub fn custom(
        arch: Architecture,
        resolution: usize,
        conv: [usize; 4],
        head: HeadWidths,
    ) -> Result<Self> {
        if resolution < 8 || !resolution.is_multiple_of(8) {
            return Err(LeafError::Config(format!(
                "input resolution {resolution} must be a positive multiple of 8"
            )));
        }
        let conv3 = |i, o, stride| LayerConfig::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let pool = LayerConfig::MaxPool2d { window: 2, stride: 2 };
        let mut layers = vec![
            conv3(3, conv[0], 1),
            LayerConfig::Relu,
            pool.clone(),
            conv3(conv[0], conv[1], 1),
            LayerConfig::Relu,
            pool,
            conv3(conv[1], conv[2], 2),
            LayerConfig::Relu,
            conv3(conv[2], conv[3], 1),
            LayerConfig::Relu,
        ];
        let side = resolution / 8;
        match arch {
            Architecture::BaselineCnn => layers.extend([
                LayerConfig::Flatten,
                LayerConfig::Dense { inputs: side * side * conv[3], outputs: head.first },
                LayerConfig::Relu,
                LayerConfig::Dense { inputs: head.first, outputs: head.second },
                LayerConfig::Relu,
                LayerConfig::Dense { inputs: head.second, outputs: NUM_CLASSES },
            ]),
            Architecture::HybridCnnLstm => layers.extend([
                LayerConfig::SequenceReshape,
                LayerConfig::Lstm { input_size: side * conv[3], hidden_size: head.first },
                LayerConfig::Dense { inputs: head.first, outputs: head.second },
                LayerConfig::Relu,
                LayerConfig::Dense { inputs: head.second, outputs: NUM_CLASSES },
            ]),
        }
        let spec = ModelSpec {
            architecture: arch,
            input_channels: 3,
            input_height: resolution,
            input_width: resolution,
            classes: NUM_CLASSES,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Walks the layer chain and returns each layer's per-sample output shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |i: usize, msg: String| LeafError::Config(format!("layer {i}: {msg}"));
        let mut shape = vec![self.input_channels, self.input_height, self.input_width];
        if shape.contains(&0) {
            return Err(LeafError::Config(format!("input shape {shape:?}")));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerConfig::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(bad(i, format!("conv expects {in_channels} channels, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(bad(i, "empty convolution".into()));
                    }
                    let geom = ConvGeometry { stride: (stride, stride), padding: (padding, padding) };
                    let (h, w) = geom
                        .output_dims(shape[1], shape[2], kernel, kernel)
                        .map_err(|e| bad(i, e.to_string()))?;
                    vec![out_channels, h, w]
                }
                LayerConfig::Relu => shape,
                LayerConfig::MaxPool2d { window, stride } => {
                    if shape.len() != 3 || window == 0 || stride == 0 || window > shape[1] || window > shape[2] {
                        return Err(bad(i, format!("pool {window}/{stride} on {shape:?}")));
                    }
                    vec![shape[0], (shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1]
                }
                LayerConfig::Flatten => vec![shape.iter().product()],
                LayerConfig::Dense { inputs, outputs } => {
                    if shape != [inputs] || outputs == 0 {
                        return Err(bad(i, format!("dense expects [{inputs}], got {shape:?}")));
                    }
                    vec![outputs]
                }
                LayerConfig::SequenceReshape => {
                    if shape.len() != 3 {
                        return Err(bad(i, format!("sequence reshape of {shape:?}")));
                    }
                    vec![shape[1], shape[2] * shape[0]]
                }
                LayerConfig::Lstm { input_size, hidden_size } => {
                    if shape.len() != 2 || shape[1] != input_size || hidden_size == 0 {
                        return Err(bad(i, format!("LSTM expects [T, {input_size}], got {shape:?}")));
                    }
                    vec![hidden_size]
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [self.classes] {
            return Err(LeafError::Config(format!(
                "network emits {shape:?}, expected [{}] logits",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// `(name, shape)` of every parameter tensor in serialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes().into_iter().map(move |(n, s)| (format!("layer{i}.{n}"), s))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Indices into `layers` of every convolution.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerConfig::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<NamedParam>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Output of every layer, indexed like `ModelSpec::layers`.
    pub activations: Vec<Var>,
    pub params: Vec<Var>,
}

impl Model {
    /// Builds a freshly initialised network. Conv and dense weights are
    /// He-normal, LSTM gates Glorot-uniform with forget bias 1, other biases 0.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let shapes = layer.param_shapes();
            for (name, shape) in shapes {
                let tensor = match (layer, name) {
                    (LayerConfig::Conv2d { in_channels, kernel, .. }, "weight") => {
                        he_init(in_channels * kernel * kernel, &shape, &mut rng)?
                    }
                    (LayerConfig::Dense { inputs, .. }, "weight") => he_init(*inputs, &shape, &mut rng)?,
                    (LayerConfig::Lstm { input_size, hidden_size }, n) if n.starts_with("w_") => {
                        glorot_uniform(input_size + hidden_size, 4 * hidden_size, &shape, &mut rng)?
                    }
                    (LayerConfig::Lstm { .. }, "b_f") => Tensor::ones(&shape)?,
                    _ => Tensor::zeros(&shape)?,
                };
                params.push(NamedParam { name: format!("layer{i}.{name}"), tensor });
            }
        }
        Ok(Model { spec, params })
    }

    /// Rebuilds a model from a flat weight buffer in serialization order.
    pub fn from_weights(spec: ModelSpec, weights: &[f32]) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if total != weights.len() {
            return Err(LeafError::Config(format!(
                "spec needs {total} weights, got {}",
                weights.len()
            )));
        }
        let mut offset = 0;
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let tensor = Tensor::from_vec(&shape, weights[offset..offset + n].to_vec())?;
            offset += n;
            params.push(NamedParam { name, tensor });
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn flat_weights(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.tensor)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward> {
        let params = self.register_params(tape);
        self.forward_with(tape, x, &params)
    }

    /// Forward pass using parameter handles already on `tape`, one per
    /// entry of [`Model::params`].
    pub fn forward_with(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(LeafError::Config(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let s = tape.shape(x);
        let want = [self.spec.input_channels, self.spec.input_height, self.spec.input_width];
        if s.len() != 4 || s[1..] != want {
            return Err(LeafError::shape(format!("model input {s:?}, expected [B, {want:?}]")));
        }
        let batch = s[0];
        let mut cursor = 0;
        let mut take = |n: usize| {
            let slice = &params[cursor..cursor + n];
            cursor += n;
            slice
        };
        let mut h = x;
        let mut activations = Vec::with_capacity(self.spec.layers.len());
        for layer in &self.spec.layers {
            h = match *layer {
                LayerConfig::Conv2d { stride, padding, .. } => {
                    let p = take(2);
                    let geom = ConvGeometry { stride: (stride, stride), padding: (padding, padding) };
                    tape.conv2d(h, p[0], p[1], geom)?
                }
                LayerConfig::Relu => tape.relu(h),
                LayerConfig::MaxPool2d { window, stride } => tape.maxpool2d(h, window, stride)?,
                LayerConfig::Flatten => {
                    let n: usize = tape.shape(h)[1..].iter().product();
                    tape.reshape(h, &[batch, n])?
                }
                LayerConfig::Dense { .. } => {
                    let p = take(2);
                    tape.linear(h, p[0], Some(p[1]))?
                }
                LayerConfig::SequenceReshape => tape.to_sequence(h)?,
                LayerConfig::Lstm { input_size, hidden_size } => {
                    let vars = LstmVars::from_slice(input_size, hidden_size, take(8))?;
                    lstm_forward(tape, h, &vars)?
                }
            };
            activations.push(h);
        }
        Ok(Forward { logits: h, activations, params: params.to_vec() })
    }

    /// Logits for a batch `[B,C,H,W]` without keeping the tape.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, x)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

/// Builds and initialises the network described by `spec`.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    Model::build(spec, seed)
}
