//! Seeded view augmentation: random resized crop, horizontal flip and
//! brightness/contrast jitter.

use rand::Rng;

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamRng};

const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop area as a fraction of the image, `(lo, hi)`.
    pub crop_scale: (f64, f64),
    /// Crop width / height, `(lo, hi)`, sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        let ok = 0.0 < slo
            && slo <= shi
            && shi <= 1.0
            && 0.0 < rlo
            && rlo <= rhi
            && (0.0..=1.0).contains(&self.flip_p)
            && (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

/// Crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Window {
    top: f64,
    left: f64,
    height: f64,
    width: f64,
}

fn sample_window(h: usize, w: usize, p: &AugmentParams, r: &mut impl Rng) -> Window {
    let (hf, wf) = (h as f64, w as f64);
    let full = Window {
        top: 0.0,
        left: 0.0,
        height: hf,
        width: wf,
    };
    if p.crop_scale == (1.0, 1.0) {
        return full;
    }
    let (llo, lhi) = (p.crop_ratio.0.ln(), p.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let area = hf * wf * r.random_range(p.crop_scale.0..=p.crop_scale.1);
        let ratio = if llo < lhi { r.random_range(llo..lhi).exp() } else { llo.exp() };
        let cw = (area * ratio).sqrt();
        let ch = (area / ratio).sqrt();
        if cw >= 1.0 && ch >= 1.0 && cw <= wf && ch <= hf {
            return Window {
                top: r.random_range(0.0..=hf - ch),
                left: r.random_range(0.0..=wf - cw),
                height: ch,
                width: cw,
            };
        }
    }
    full
}

/// Bilinear resample of one channel plane from `win` to a full `h x w` grid,
/// sampling at pixel centres with edge clamping.
fn resample(src: &[f32], h: usize, w: usize, win: Window, out: &mut [f32]) {
    let sy = win.height / h as f64;
    let sx = win.width / w as f64;
    for y in 0..h {
        let fy = (win.top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = (win.left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
}

/// Augments image `i` of `batch` with `r`; the result is normalized like the
/// input and clamped to the valid normalized range.
pub fn augment_view(batch: &ImageBatch, i: usize, p: &AugmentParams, r: &mut StreamRng) -> Vec<f32> {
    let s = batch.shape();
    let (h, w, plane) = (s.h, s.w, s.plane());
    let norm = batch.normalization();
    let src = batch.image(i);
    let win = sample_window(h, w, p, r);
    let flip = p.flip_p > 0.0 && r.random_bool(p.flip_p);
    let bright = if p.brightness > 0.0 {
        r.random_range(1.0 - p.brightness..=1.0 + p.brightness) as f32
    } else {
        1.0
    };
    let contrast = if p.contrast > 0.0 {
        r.random_range(1.0 - p.contrast..=1.0 + p.contrast) as f32
    } else {
        1.0
    };

    let mut out = if win.height == h as f64 && win.width == w as f64 {
        src.to_vec()
    } else {
        let mut out = vec![0.0f32; src.len()];
        for c in 0..s.c {
            resample(&src[c * plane..(c + 1) * plane], h, w, win, &mut out[c * plane..(c + 1) * plane]);
        }
        out
    };
    if flip {
        for row in out.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if bright != 1.0 || contrast != 1.0 {
        for c in 0..s.c {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v = norm.denormalize(c, *v) * bright;
            }
        }
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() as f32 / out.len() as f32;
        for c in 0..s.c {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v = norm.normalize(c, ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
            }
        }
    }
    for c in 0..s.c {
        let (lo, hi) = norm.valid_range(c);
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v = v.clamp(lo, hi);
        }
    }
    out
}

/// Augments every image of `batch`; image `i` draws from the stream
/// `(seed, Augment, [step, view, i])`, so results do not depend on which
/// worker produces them.
pub fn augment_batch(batch: &ImageBatch, p: &AugmentParams, seed: u64, step: u64, view: u64) -> Result<ImageBatch> {
    p.validate()?;
    let mut data = Vec::with_capacity(batch.data().len());
    for i in 0..batch.len() {
        let mut r = rng::stream(seed, Domain::Augment, &[step, view, i as u64]);
        data.extend(augment_view(batch, i, p, &mut r));
    }
    batch.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{gen_synthetic, SyntheticKind, SyntheticSpec};

    fn sample_batch() -> ImageBatch {
        gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Shapes,
            classes: 4,
            per_class: 2,
            image_size: 16,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn identity_parameters_are_identity() {
        let b = sample_batch();
        let out = augment_batch(&b, &AugmentParams::identity(), 5, 0, 0).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn seeded_views_reproduce() {
        let b = sample_batch();
        let p = AugmentParams::default();
        let a = augment_batch(&b, &p, 5, 3, 1).unwrap();
        assert_eq!(a, augment_batch(&b, &p, 5, 3, 1).unwrap());
        assert_ne!(a, augment_batch(&b, &p, 5, 3, 0).unwrap());
    }

    #[test]
    fn output_stays_in_valid_range() {
        let b = sample_batch();
        let p = AugmentParams {
            brightness: 0.9,
            contrast: 0.9,
            ..AugmentParams::default()
        };
        for step in 0..5 {
            let out = augment_batch(&b, &p, 1, step, 0).unwrap();
            let plane = out.shape().plane();
            for (idx, v) in out.data().iter().enumerate() {
                let (lo, hi) = out.normalization().valid_range((idx / plane) % 3);
                assert!(*v >= lo && *v <= hi);
            }
        }
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let b = sample_batch();
        let p = AugmentParams {
            flip_p: 1.0,
            ..AugmentParams::identity()
        };
        let out = augment_batch(&b, &p, 0, 0, 0).unwrap();
        let w = b.shape().w;
        for (src, dst) in b.data().chunks(w).zip(out.data().chunks(w)) {
            let mut r = src.to_vec();
            r.reverse();
            assert_eq!(r, dst);
        }
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let b = sample_batch();
        let flat = b.with_data(vec![0.25; b.data().len()]).unwrap();
        let p = AugmentParams {
            brightness: 0.0,
            contrast: 0.0,
            ..AugmentParams::default()
        };
        let out = augment_batch(&flat, &p, 2, 0, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
