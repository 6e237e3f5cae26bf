//! Image augmentations. Every op is a pure function of its input and
//! parameters; randomness enters only through [`sample_plan`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentationKind, ImageF32};
use crate::error::{LeafError, Result};

pub const BRIGHTNESS_RANGE: (f32, f32) = (1.1, 1.5);
pub const CROP_RANGE: (f32, f32) = (0.7, 0.9);
/// Magnitude range in degrees; the sign is drawn separately.
pub const ROTATION_RANGE: (f32, f32) = (2.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

fn check_range(name: &str, v: f32, (lo, hi): (f32, f32)) -> Result<()> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(LeafError::Parameter(format!("{name} {v} outside [{lo}, {hi}]")))
    }
}

/// Multiplies every channel by `factor` and clamps to `[0, 1]`.
pub fn scale_brightness(img: &ImageF32, factor: f32) -> ImageF32 {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    out
}

pub fn augment_brightness(img: &ImageF32, factor: f32) -> Result<ImageF32> {
    check_range("brightness factor", factor, BRIGHTNESS_RANGE)?;
    Ok(scale_brightness(img, factor))
}

pub fn augment_flip(img: &ImageF32, axis: Axis) -> ImageF32 {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                Axis::Horizontal => (w - 1 - x, y),
                Axis::Vertical => (x, h - 1 - y),
            };
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

fn bilinear(img: &ImageF32, u: f32, v: f32) -> [f32; 3] {
    let x0 = (u.floor().max(0.0) as usize).min(img.width() - 1);
    let y0 = (v.floor().max(0.0) as usize).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = (u - x0 as f32).clamp(0.0, 1.0);
    let fy = (v - y0 as f32).clamp(0.0, 1.0);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    std::array::from_fn(|k| {
        let top = a[k] + (b[k] - a[k]) * fx;
        let bottom = c[k] + (d[k] - c[k]) * fx;
        top + (bottom - top) * fy
    })
}

/// Crops a `fraction`-sized window whose top-left corner sits at `anchor`
/// (each in `[0, 1]`, relative to the free margin) and resizes it back to
/// the input dimensions bilinearly. Takes any fraction in `(0, 1]`.
pub fn crop_resize(img: &ImageF32, fraction: f32, anchor: (f32, f32)) -> Result<ImageF32> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LeafError::Parameter(format!("crop fraction {fraction} outside (0, 1]")));
    }
    check_range("crop anchor x", anchor.0, (0.0, 1.0))?;
    check_range("crop anchor y", anchor.1, (0.0, 1.0))?;
    let (w, h) = (img.width(), img.height());
    let cw = ((w as f32 * fraction).round() as usize).clamp(1, w);
    let ch = ((h as f32 * fraction).round() as usize).clamp(1, h);
    let x0 = ((w - cw) as f32 * anchor.0).round();
    let y0 = ((h - ch) as f32 * anchor.1).round();
    let (sx, sy) = (cw as f32 / w as f32, ch as f32 / h as f32);
    ImageF32::from_fn(w, h, |x, y| {
        let u = x0 + ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32);
        let v = y0 + ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32);
        bilinear(img, u, v)
    })
}

pub fn augment_crop(img: &ImageF32, fraction: f32, anchor: (f32, f32)) -> Result<ImageF32> {
    check_range("crop fraction", fraction, CROP_RANGE)?;
    crop_resize(img, fraction, anchor)
}

/// Mirrors `u` back into `[0, n-1]` without repeating the edge sample.
fn reflect(u: f32, n: usize) -> f32 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f32;
    let v = u.rem_euclid(2.0 * last);
    if v > last { 2.0 * last - v } else { v }
}

fn rotate_bilinear(img: &ImageF32, degrees: f32) -> ImageF32 {
    let (w, h) = (img.width(), img.height());
    let (sin, cos) = (degrees as f64).to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    ImageF32::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let u = cx + cos * dx - sin * dy;
        let v = cy + sin * dx + cos * dy;
        bilinear(img, reflect(u as f32, w), reflect(v as f32, h))
    })
    .expect("same dimensions as input")
}

/// Rotates counter-clockwise (as displayed) about the image centre, keeping
/// the input dimensions; uncovered corners are filled by reflection.
/// Quarter turns of square images, and half turns of any image, move pixels
/// exactly.
pub fn augment_rotate(img: &ImageF32, degrees: f32) -> ImageF32 {
    let (w, h) = (img.width(), img.height());
    let quarter = degrees / 90.0;
    if quarter == quarter.round() {
        let turns = (quarter as i64).rem_euclid(4);
        if turns == 0 {
            return img.clone();
        }
        if turns == 2 || w == h {
            return ImageF32::from_fn(w, h, |x, y| match turns {
                1 => img.pixel(w - 1 - y, x),
                2 => img.pixel(w - 1 - x, h - 1 - y),
                _ => img.pixel(y, h - 1 - x),
            })
            .expect("same dimensions as input");
        }
    }
    rotate_bilinear(img, degrees)
}

/// One parameterized augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Brightness { factor: f32 },
    Crop { fraction: f32, anchor: (f32, f32) },
    Flip { axis: Axis },
    Rotate { degrees: f32 },
}

impl AugmentOp {
    pub fn apply(&self, img: &ImageF32) -> Result<ImageF32> {
        match *self {
            AugmentOp::Brightness { factor } => augment_brightness(img, factor),
            AugmentOp::Crop { fraction, anchor } => augment_crop(img, fraction, anchor),
            AugmentOp::Flip { axis } => Ok(augment_flip(img, axis)),
            AugmentOp::Rotate { degrees } => Ok(augment_rotate(img, degrees)),
        }
    }

    fn sample(slot: usize, rng: &mut ChaCha8Rng) -> Self {
        match slot {
            0 => AugmentOp::Brightness { factor: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1) },
            1 => AugmentOp::Crop {
                fraction: rng.random_range(CROP_RANGE.0..=CROP_RANGE.1),
                anchor: (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)),
            },
            2 => AugmentOp::Flip { axis: if rng.random_bool(0.5) { Axis::Horizontal } else { Axis::Vertical } },
            _ => {
                let magnitude = rng.random_range(ROTATION_RANGE.0..=ROTATION_RANGE.1);
                AugmentOp::Rotate { degrees: if rng.random_bool(0.5) { magnitude } else { -magnitude } }
            }
        }
    }
}

/// Ordered list of ops applied in sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub ops: Vec<AugmentOp>,
}

impl AugmentPlan {
    pub fn apply(&self, img: &ImageF32) -> Result<ImageF32> {
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(&out)?;
        }
        Ok(out)
    }
}

/// The 14 non-empty subsets of at most three of the four ops, as bit masks
/// over (brightness, crop, flip, rotation).
fn combination_subsets() -> impl Iterator<Item = u8> {
    (1u8..16).filter(|m| m.count_ones() <= 3)
}

/// Draws the parameters for one variant of `kind`. Combination picks one of
/// the 14 subsets uniformly and applies it in canonical order.
pub fn sample_plan(kind: AugmentationKind, rng: &mut ChaCha8Rng) -> AugmentPlan {
    let slots: Vec<usize> = match kind {
        AugmentationKind::Brightness => vec![0],
        AugmentationKind::Crop => vec![1],
        AugmentationKind::Flip => vec![2],
        AugmentationKind::Rotation => vec![3],
        AugmentationKind::Combination => {
            let subsets: Vec<u8> = combination_subsets().collect();
            let mask = subsets[rng.random_range(0..subsets.len())];
            (0..4).filter(|b| mask & (1 << b) != 0).collect()
        }
    };
    AugmentPlan { ops: slots.into_iter().map(|s| AugmentOp::sample(s, rng)).collect() }
}

pub fn augment_combination(img: &ImageF32, seed: u64) -> Result<ImageF32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_plan(AugmentationKind::Combination, &mut rng).apply(img)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for variant `variant` of sample `index`.
pub fn sample_seed(seed: u64, kind: AugmentationKind, index: u64, variant: u64) -> u64 {
    [kind as u64 + 1, index, variant].into_iter().fold(splitmix64(seed), |h, v| splitmix64(h ^ splitmix64(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageF32 {
        ImageF32::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.25]).unwrap()
    }

    #[test]
    fn brightness_values_and_range() {
        let gray = ImageF32::filled(2, 2, [0.5; 3]).unwrap();
        let out = augment_brightness(&gray, 1.4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let white = ImageF32::filled(2, 2, [1.0; 3]).unwrap();
        assert_eq!(augment_brightness(&white, 1.3).unwrap(), white);
        assert_eq!(scale_brightness(&gray, 1.0), gray);
        assert!(matches!(augment_brightness(&gray, 1.0), Err(LeafError::Parameter(_))));
        assert!(matches!(augment_brightness(&gray, 1.6), Err(LeafError::Parameter(_))));
    }

    #[test]
    fn flip_two_by_two() {
        let img = ImageF32::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let h = augment_flip(&img, Axis::Horizontal);
        assert_eq!(h.pixel(0, 0), img.pixel(1, 0));
        assert_eq!(h.pixel(1, 1), img.pixel(0, 1));
        let v = augment_flip(&img, Axis::Vertical);
        assert_eq!(v.pixel(0, 0), img.pixel(0, 1));
    }

    #[test]
    fn crop_identity_and_range() {
        let img = ramp(9, 7);
        assert_eq!(crop_resize(&img, 1.0, (0.5, 0.5)).unwrap(), img);
        assert!(matches!(augment_crop(&img, 0.95, (0.0, 0.0)), Err(LeafError::Parameter(_))));
        assert!(matches!(augment_crop(&img, 0.8, (1.5, 0.0)), Err(LeafError::Parameter(_))));
        let out = augment_crop(&img, 0.7, (1.0, 0.0)).unwrap();
        assert_eq!((out.width(), out.height()), (9, 7));
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(9.0, 5), 1.0);
        assert_eq!(reflect(2.5, 5), 2.5);
        assert_eq!(reflect(-3.0, 1), 0.0);
    }

    #[test]
    fn exact_quarter_turn_agrees_with_sampler() {
        let img = ramp(6, 6);
        for deg in [90.0, 180.0, 270.0, -90.0] {
            let exact = augment_rotate(&img, deg);
            let sampled = rotate_bilinear(&img, deg);
            assert!(exact.max_abs_diff(&sampled) < 1e-4, "{deg}");
        }
        // 90° rotation moves the top-right corner to the top-left
        assert_eq!(augment_rotate(&img, 90.0).pixel(0, 0), img.pixel(5, 0));
    }

    #[test]
    fn fourteen_subsets() {
        let subsets: Vec<u8> = combination_subsets().collect();
        assert_eq!(subsets.len(), 14);
        assert!(!subsets.contains(&0b1111));
    }

    #[test]
    fn seeds_differ_per_coordinate() {
        let base = sample_seed(1, AugmentationKind::Flip, 0, 0);
        assert_ne!(base, sample_seed(2, AugmentationKind::Flip, 0, 0));
        assert_ne!(base, sample_seed(1, AugmentationKind::Crop, 0, 0));
        assert_ne!(base, sample_seed(1, AugmentationKind::Flip, 1, 0));
        assert_ne!(base, sample_seed(1, AugmentationKind::Flip, 0, 1));
        assert_eq!(base, sample_seed(1, AugmentationKind::Flip, 0, 0));
    }
}
