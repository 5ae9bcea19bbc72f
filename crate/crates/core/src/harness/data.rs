//! Synthetic segmentation scenes: a noisy background (class 0) with one
//! coloured rectangle or disk per foreground class, occasionally two.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
const COLOR_JITTER: f64 = 0.08;
/// A layout is redrawn until every class covers at least this many pixels.
const MIN_CLASS_PIXELS: usize = 4;
const MAX_LAYOUT_ATTEMPTS: usize = 64;

/// Aligned images (`[H, W, 3]`, values in `[0, 1]`) and masks (`[H, W]`,
/// class ids stored as `f64`).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub classes: usize,
    /// Generator seed, when the set came from [`gen_synthetic`].
    pub seed: Option<u64>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks alignment, value ranges and class ids.
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.masks.len() {
            return Err(Error::InvalidTensor(format!(
                "dataset needs equally many images and masks, got {} and {}",
                self.images.len(),
                self.masks.len()
            )));
        }
        let first = self.images[0].shape().to_vec();
        for (i, (img, mask)) in self.images.iter().zip(&self.masks).enumerate() {
            let s = img.shape();
            if s != first.as_slice() || s.len() != 3 || mask.shape() != &s[..2] {
                return Err(Error::InvalidTensor(format!(
                    "item {i}: image {:?} and mask {:?} are not aligned with {first:?}",
                    s,
                    mask.shape()
                )));
            }
            check_mask(mask, self.classes).map_err(|e| Error::InvalidTensor(format!("item {i}: {e}")))?;
        }
        Ok(())
    }
}

pub(crate) fn check_mask(mask: &Tensor, classes: usize) -> Result<()> {
    match mask
        .data()
        .iter()
        .find(|&&v| !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes))
    {
        Some(v) => Err(Error::InvalidTensor(format!(
            "mask value {v} is not a class id below {classes}"
        ))),
        None => Ok(()),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base colour of each class: dark grey background, evenly spaced hues for
/// the foreground classes.
pub fn palette(classes: usize) -> Vec<[f64; 3]> {
    let fg = classes - 1;
    std::iter::once([0.2, 0.2, 0.2])
        .chain((0..fg).map(|c| hsv_to_rgb(c as f64 / fg as f64, 0.75, 0.9)))
        .collect()
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { top: f64, left: f64, h: f64, w: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random<R: Rng>(size: usize, rng: &mut R) -> Shape {
        let s = size as f64;
        if rng.random_bool(0.5) {
            let h = rng.random_range(0.2 * s..0.45 * s);
            let w = rng.random_range(0.2 * s..0.45 * s);
            Shape::Rect {
                top: rng.random_range(0.0..s - h),
                left: rng.random_range(0.0..s - w),
                h,
                w,
            }
        } else {
            let r = rng.random_range(0.1 * s..0.22 * s);
            Shape::Disk {
                cy: rng.random_range(r..s - r),
                cx: rng.random_range(r..s - r),
                r,
            }
        }
    }

    /// Tested at pixel centres.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { top, left, h, w } => py >= top && py < top + h && px >= left && px < left + w,
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        }
    }
}

fn layout<R: Rng>(size: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut last = vec![0; size * size];
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut order: Vec<usize> = (1..classes).collect();
        order.shuffle(rng);
        let mut draws = Vec::new();
        for &c in &order {
            draws.push((c, Shape::random(size, rng)));
            if rng.random_bool(0.25) {
                draws.push((c, Shape::random(size, rng)));
            }
        }
        let mut mask = vec![0usize; size * size];
        for (c, shape) in &draws {
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(y, x) {
                        mask[y * size + x] = *c;
                    }
                }
            }
        }
        let mut counts = vec![0usize; classes];
        mask.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().all(|&n| n >= MIN_CLASS_PIXELS) {
            return mask;
        }
        last = mask;
    }
    last
}

/// Deterministic scene set for a given seed.
pub fn gen_synthetic(seed: u64, count: usize, size: usize, classes: usize) -> Result<SyntheticDataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if count == 0 {
        return Err(Error::Config("image count must be positive".into()));
    }
    if size < 8 || !size.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "image size must be a multiple of 4 and at least 8, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let base = palette(classes);
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = layout(size, classes, &mut rng);
        let colors: Vec<[f64; 3]> = base
            .iter()
            .map(|c| c.map(|v| v + rng.random_range(-COLOR_JITTER..COLOR_JITTER)))
            .collect();
        let mut pixels = Vec::with_capacity(size * size * 3);
        for &c in &mask {
            for &v in &colors[c] {
                pixels.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        images.push(Tensor::new(&[size, size, 3], pixels)?);
        masks.push(Tensor::new(&[size, size], mask.iter().map(|&c| c as f64).collect())?);
    }
    Ok(SyntheticDataset {
        images,
        masks,
        classes,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let a = gen_synthetic(3, 4, 16, 3).unwrap();
        let b = gen_synthetic(3, 4, 16, 3).unwrap();
        for (x, y) in a.images.iter().zip(&b.images).chain(a.masks.iter().zip(&b.masks)) {
            assert!(x.bit_eq(y));
        }
        let c = gen_synthetic(4, 4, 16, 3).unwrap();
        assert!(!a.images[0].bit_eq(&c.images[0]));
    }

    #[test]
    fn binary_masks_hold_only_zero_and_one() {
        let d = gen_synthetic(0, 10, 16, 2).unwrap();
        d.validate().unwrap();
        for m in &d.masks {
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn pixel_values_in_unit_range() {
        let d = gen_synthetic(1, 8, 32, 4).unwrap();
        assert!(d
            .images
            .iter()
            .all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(gen_synthetic(0, 1, 30, 3).is_err());
        assert!(gen_synthetic(0, 1, 4, 3).is_err());
        assert!(gen_synthetic(0, 1, 16, 1).is_err());
        assert!(gen_synthetic(0, 0, 16, 3).is_err());
    }
}
