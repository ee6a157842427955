//! Procedural labelled shape images standing in for a natural-image dataset.

use crate::error::{Error, Result};
use crate::ndgrad::{Array, Rng};

/// Shape families, in label order.
pub const CLASS_NAMES: [&str; 8] = ["disk", "square", "cross", "h-stripes", "v-stripes", "ring", "triangle", "checker"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeConfig {
    pub size: usize,
    pub classes: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self { size: 16, classes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// Position in the generated sequence; the sample is a pure function of
    /// `(seed, index)`.
    pub index: usize,
    /// `[H, W, 1]` in `[-1, 1]`.
    pub image: Array,
    pub label: usize,
}

fn render(class: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let s = rng.uniform_range(0.22, 0.36) * size as f32;
    // Centres stay within an eighth of the frame of the middle, so every
    // shape is whole and pixel position carries class information.
    let jitter = size as f32 / 8.0;
    let cy = size as f32 / 2.0 + rng.uniform_range(-jitter, jitter);
    let cx = size as f32 / 2.0 + rng.uniform_range(-jitter, jitter);
    let fg = rng.uniform_range(0.3, 1.0);
    let bg = rng.uniform_range(-1.0, -0.6);
    let period = 2 + rng.below(2);
    let phase = rng.below(period * 2);
    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let dy = r as f32 + 0.5 - cy;
            let dx = c as f32 + 0.5 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            let in_box = dy.abs() <= s && dx.abs() <= s;
            let inside = match class {
                0 => dist <= s,
                1 => dy.abs() <= 0.8 * s && dx.abs() <= 0.8 * s,
                2 => {
                    let arm = (s / 3.0).max(1.0);
                    (dy.abs() <= arm && dx.abs() <= s) || (dx.abs() <= arm && dy.abs() <= s)
                }
                3 => in_box && ((r + phase) / period).is_multiple_of(2),
                4 => in_box && ((c + phase) / period).is_multiple_of(2),
                5 => dist <= s && dist >= 0.55 * s,
                6 => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
                _ => in_box && ((r + phase) / period + (c + phase) / period).is_multiple_of(2),
            };
            let base = if inside { fg } else { bg };
            img.push((base + 0.03 * rng.normal()).clamp(-1.0, 1.0));
        }
    }
    img
}

/// Generate `n` samples; labels cycle through the classes so the histogram
/// is balanced to within one.
pub fn gen(seed: u64, n: usize, cfg: ShapeConfig) -> Result<Vec<ShapeSample>> {
    gen_range(seed, 0..n, cfg)
}

/// Samples with indices in `range`, identical to the matching slice of
/// [`gen`] over a longer prefix.
pub fn gen_range(seed: u64, range: std::ops::Range<usize>, cfg: ShapeConfig) -> Result<Vec<ShapeSample>> {
    if range.is_empty() {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    if cfg.classes == 0 || cfg.classes > CLASS_NAMES.len() {
        return Err(Error::Config(format!("classes must be in 1..={}, got {}", CLASS_NAMES.len(), cfg.classes)));
    }
    if cfg.size < 4 {
        return Err(Error::Config(format!("image size {} is too small", cfg.size)));
    }
    let root = Rng::new(seed);
    range
        .map(|index| {
            let label = index % cfg.classes;
            let mut rng = root.split_index("shape", index as u64);
            let data = render(label, cfg.size, &mut rng);
            Ok(ShapeSample { index, image: Array::new(&[cfg.size, cfg.size, 1], data)?, label })
        })
        .collect()
}

fn index_hash(index: usize) -> u64 {
    let mut z = (index as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic train/holdout partition keyed on each sample's index.
///
/// The `round(fraction * n)` samples with the smallest index hashes form the
/// holdout; both parts keep their original relative order.
pub fn split(samples: Vec<ShapeSample>, holdout_fraction: f64) -> Result<(Vec<ShapeSample>, Vec<ShapeSample>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Domain(format!("holdout fraction must be in (0, 1), got {holdout_fraction}")));
    }
    let n_hold = (holdout_fraction * samples.len() as f64).round() as usize;
    let mut order: Vec<(u64, usize)> = samples.iter().enumerate().map(|(pos, s)| (index_hash(s.index), pos)).collect();
    order.sort_unstable();
    let mut is_hold = vec![false; samples.len()];
    for &(_, pos) in &order[..n_hold] {
        is_hold[pos] = true;
    }
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (s, h) in samples.into_iter().zip(is_hold) {
        if h {
            hold.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, hold))
}

/// Stack sample images into `[B, H, W, 1]` with their labels.
pub fn batch(samples: &[&ShapeSample]) -> Result<(Array, Vec<usize>)> {
    let images: Vec<Array> = samples.iter().map(|s| s.image.clone()).collect();
    Ok((Array::stack(&images)?, samples.iter().map(|s| s.label).collect()))
}
