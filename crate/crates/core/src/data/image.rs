use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// RGB image with interleaved `f32` channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(LeafError::InvalidShape(vec![height, width, 3]));
        }
        if data.len() != width * height * 3 {
            return Err(LeafError::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    /// Builds an image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// Quantizes to 8 bits per channel, rounding to nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("dimensions match buffer")
    }

    /// Decodes an image file, resizing with a bilinear filter to
    /// `resolution × resolution` when given.
    pub fn load(path: &Path, resolution: Option<usize>) -> Result<Self> {
        Ok(Self::from_rgb8(&load_rgb8(path, resolution)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| LeafError::Image { path: path.to_path_buf(), source })
    }

    /// Channel-major `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("non-empty image")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Decoded 8-bit RGB, optionally resized to a square resolution.
pub(crate) fn load_rgb8(path: &Path, resolution: Option<usize>) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| LeafError::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    Ok(match resolution {
        Some(r) if rgb.width() as usize != r || rgb.height() as usize != r => {
            image::imageops::resize(&rgb, r as u32, r as u32, FilterType::Triangle)
        }
        _ => rgb,
    })
}
