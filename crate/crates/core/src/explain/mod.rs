//! Grad-CAM class-activation maps and viridis overlays.

mod viridis;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::ImageF32;
use crate::error::{LeafError, Result};
use crate::layers::{LayerConfig, Model};
use crate::tensor::Tensor;

pub use viridis::VIRIDIS;

/// Non-negative class-activation map over one conv layer's spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Row-major `height × width` values.
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Index into the model's layer list.
    pub layer: usize,
    pub class: usize,
    pub min: f32,
    pub max: f32,
}

impl Heatmap {
    pub fn new(values: Vec<f32>, height: usize, width: usize, layer: usize, class: usize) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(LeafError::shape(format!("{} heatmap values for a {height}x{width} grid", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(LeafError::Numeric(format!("heatmap value {v} is not a finite non-negative number")));
        }
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Ok(Self { values, height, width, layer, class, min, max })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Maps `[min, max]` onto `[0, 1]`; a flat map becomes all zeros.
    pub fn normalized(&self) -> Vec<f32> {
        let range = self.max - self.min;
        if range <= 0.0 {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| ((v - self.min) / range).clamp(0.0, 1.0)).collect()
    }
}

/// Grad-CAM from channel activations `[C,H,W]` and the gradient of the
/// class score with respect to them.
pub fn gradcam_map(activations: &[f32], grads: &[f32], channels: usize, height: usize, width: usize) -> Result<Vec<f32>> {
    let plane = height * width;
    if activations.len() != channels * plane || grads.len() != activations.len() || plane == 0 {
        return Err(LeafError::shape(format!(
            "activations {} and gradients {} for [{channels},{height},{width}]",
            activations.len(),
            grads.len()
        )));
    }
    let weights: Vec<f64> = grads.chunks(plane).map(|g| g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect();
    let mut map = vec![0.0f64; plane];
    for (a, w) in activations.chunks(plane).zip(&weights) {
        for (m, &v) in map.iter_mut().zip(a) {
            *m += w * v as f64;
        }
    }
    Ok(map.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Runs the reverse pass from `score` and applies [`gradcam_map`] to
/// `activation`, which must have shape `[1,C,H,W]`.
pub fn gradcam_on_tape(tape: &mut Tape, activation: Var, score: Var) -> Result<(Vec<f32>, usize, usize)> {
    let shape = tape.shape(activation).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(LeafError::shape(format!("Grad-CAM needs a [1,C,H,W] activation, got {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    tape.backward(score)?;
    let zeros;
    let grads = match tape.grad(activation) {
        Some(g) => g,
        None => {
            zeros = vec![0.0; c * h * w];
            &zeros
        }
    };
    let map = gradcam_map(tape.value(activation).data(), grads, c, h, w)?;
    Ok((map, h, w))
}

/// Heatmap for `class` at conv layer `layer` (an index into the model's
/// layers). Uses the rectified output when a ReLU follows the convolution.
/// `image` must match the model's input size.
pub fn gradcam(model: &Model, image: &ImageF32, class: usize, layer: usize) -> Result<Heatmap> {
    let spec = model.spec();
    if class >= spec.classes {
        return Err(LeafError::Config(format!("target class {class} out of range for {} classes", spec.classes)));
    }
    if !matches!(spec.layers.get(layer), Some(LayerConfig::Conv2d { .. })) {
        return Err(LeafError::Config(format!(
            "layer {layer} is not a convolution; conv layers are {:?}",
            spec.conv_layers()
        )));
    }
    if (image.width(), image.height()) != (spec.input_width, spec.input_height) {
        return Err(LeafError::shape(format!(
            "image is {}x{}, the model expects {}x{}",
            image.width(),
            image.height(),
            spec.input_width,
            spec.input_height
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.to_chw().reshape(&[1, 3, image.height(), image.width()])?);
    let fwd = model.forward(&mut tape, x)?;
    let target = match spec.layers.get(layer + 1) {
        Some(LayerConfig::Relu) => layer + 1,
        _ => layer,
    };
    let mut onehot = Tensor::zeros(&[1, spec.classes])?;
    onehot.data_mut()[class] = 1.0;
    let mask = tape.constant(onehot);
    let picked = tape.mul(fwd.logits, mask)?;
    let score = tape.sum(picked);
    let (values, h, w) = gradcam_on_tape(&mut tape, fwd.activations[target], score)?;
    Heatmap::new(values, h, w, layer, class)
}

/// Default layer for Grad-CAM: the last convolution.
pub fn last_conv_layer(model: &Model) -> Option<usize> {
    model.spec().conv_layers().last().copied()
}

fn bilinear(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f32) {
        let p = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(src - 1), p - lo as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn viridis(t: f32) -> [u8; 3] {
    VIRIDIS[(t.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// Upsamples the normalized map to the image size, colors it with viridis
/// and blends it over `image` with weight `alpha`.
pub fn render_overlay(heatmap: &Heatmap, image: &ImageF32, alpha: f32) -> Result<ImageF32> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LeafError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (w, h) = (image.width(), image.height());
    let up = bilinear(&heatmap.normalized(), heatmap.height, heatmap.width, h, w);
    let mut out = image.clone();
    for (px, &t) in out.data_mut().chunks_exact_mut(3).zip(&up) {
        let color = viridis(t);
        for (v, c) in px.iter_mut().zip(color) {
            *v = (1.0 - alpha) * *v + alpha * (c as f32 / 255.0);
        }
    }
    Ok(out)
}

/// Writes the overlay PNG and a sidecar `<name>.json` with the raw map.
/// Returns the sidecar path.
pub fn save_overlay(heatmap: &Heatmap, overlay: &ImageF32, path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))?;
    }
    overlay.save_png(path)?;
    let sidecar = path.with_extension("json");
    fs::write(&sidecar, serde_json::to_string_pretty(heatmap)? + "\n").map_err(|e| LeafError::io(&sidecar, e))?;
    Ok(sidecar)
}
