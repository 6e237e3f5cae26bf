use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::image::load_rgb8;
use super::{DatasetManifest, ImageF32, Sample, Split};
use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// Directory for decoded-pixel caches; caching is off when unset.
pub const CACHE_ENV: &str = "LEAFKIT_CACHE";

const CACHE_MAGIC: &[u8; 4] = b"LKC1";

/// Decoded images of one split, held as 8-bit channel-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSplit {
    resolution: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, resolution: usize) -> Result<Self> {
        let samples: Vec<&Sample> = manifest.split(split).collect();
        Self::load(&samples, resolution)
    }

    /// Decodes and resizes every sample, reusing the cache under
    /// `$LEAFKIT_CACHE` when the file list, sizes and mtimes match.
    pub fn load(samples: &[&Sample], resolution: usize) -> Result<Self> {
        let labels = samples.iter().map(|s| s.label.index()).collect();
        let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let key = match &cache {
            Some(_) => Some(cache_key(samples, resolution)?),
            None => None,
        };
        if let (Some(dir), Some(key)) = (&cache, &key) {
            if let Some(pixels) = read_cache(&dir.join(format!("{key}.lkc")), samples.len(), resolution) {
                log::debug!("pixel cache hit {key}");
                return Ok(Self { resolution, pixels, labels });
            }
        }
        let planes: Vec<Vec<u8>> = samples
            .par_iter()
            .map(|s| load_rgb8(&s.image_path, Some(resolution)).map(|img| to_planes(img.as_raw(), resolution)))
            .collect::<Result<_>>()?;
        let pixels = planes.concat();
        if let (Some(dir), Some(key)) = (&cache, &key) {
            if let Err(e) = write_cache(dir, key, resolution, samples.len(), &pixels) {
                log::warn!("could not write pixel cache: {e}");
            }
        }
        Ok(Self { resolution, pixels, labels })
    }

    /// In-memory split; values are quantized to 8 bits like decoded files.
    pub fn from_images(images: &[ImageF32], labels: &[usize]) -> Result<Self> {
        let resolution = images.first().map_or(0, ImageF32::width);
        if images.len() != labels.len() {
            return Err(LeafError::shape(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let mut pixels = Vec::with_capacity(images.len() * 3 * resolution * resolution);
        for img in images {
            if img.width() != resolution || img.height() != resolution {
                return Err(LeafError::shape(format!(
                    "image {}x{} in a {resolution}x{resolution} split",
                    img.width(),
                    img.height()
                )));
            }
            pixels.extend(to_planes(img.to_rgb8().as_raw(), resolution));
        }
        Ok(Self { resolution, pixels, labels: labels.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn plane_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    /// `[B, 3, R, R]` tensor of the listed samples, scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.plane_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(LeafError::shape(format!("sample {i} out of {}", self.len())));
            }
            data.extend(self.pixels[i * n..(i + 1) * n].iter().map(|&v| v as f32 / 255.0));
        }
        Tensor::from_vec(&[indices.len(), 3, self.resolution, self.resolution], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Mean and variance over every pixel value in `[0, 1]`.
    pub fn statistics(&self) -> (f64, f64) {
        let n = self.pixels.len().max(1) as f64;
        let mean = self.pixels.iter().map(|&v| v as f64 / 255.0).sum::<f64>() / n;
        let var = self.pixels.iter().map(|&v| (v as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }
}

fn to_planes(interleaved: &[u8], resolution: usize) -> Vec<u8> {
    let plane = resolution * resolution;
    let mut out = vec![0u8; plane * 3];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c];
        }
    }
    out
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_key(samples: &[&Sample], resolution: usize) -> Result<String> {
    let mut h = Sha256::new();
    h.update((resolution as u64).to_le_bytes());
    for s in samples {
        let meta = fs::metadata(&s.image_path).map_err(|e| LeafError::io(&s.image_path, e))?;
        let mtime = meta.modified().ok().and_then(|t| t.duration_since(UNIX_EPOCH).ok()).map_or(0, |d| d.as_nanos());
        h.update(s.image_path.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(meta.len().to_le_bytes());
        h.update(mtime.to_le_bytes());
    }
    Ok(hex(&h.finalize()))
}

fn read_cache(path: &Path, n: usize, resolution: usize) -> Option<Vec<u8>> {
    let bytes = fs::read(path).ok()?;
    let header = 4 + 4 + 8;
    let expected = n * 3 * resolution * resolution;
    if bytes.len() != header + expected || &bytes[..4] != CACHE_MAGIC {
        return None;
    }
    let r = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().ok()?) as usize;
    (r == resolution && count == n).then(|| bytes[header..].to_vec())
}

fn write_cache(dir: &Path, key: &str, resolution: usize, n: usize, pixels: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))?;
    let tmp = dir.join(format!("{key}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| LeafError::io(&tmp, e))?;
    f.write_all(CACHE_MAGIC)
        .and_then(|_| f.write_all(&(resolution as u32).to_le_bytes()))
        .and_then(|_| f.write_all(&(n as u64).to_le_bytes()))
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| LeafError::io(&tmp, e))?;
    let dest = dir.join(format!("{key}.lkc"));
    fs::rename(&tmp, &dest).map_err(|e| LeafError::io(&dest, e))
}
