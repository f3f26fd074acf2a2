//! WebAssembly bindings for the browser demo. Every export returns RGBA
//! pixels ready for `ImageData`; the plain functions below them carry the
//! logic and are what the native tests exercise.

use mixmask::datastore::{gen_synthetic, SyntheticKind, SyntheticSpec, SHAPE_CLASSES};
use mixmask::maskgen::{expand_to_pixels, gen_mask, MaskPattern, PixelMask};
use mixmask::mixer::{bbox_at, mix_batch, switch_batch, unmix_global_with_lambda, unmix_local_with_box, FillMode, Pairing};
use mixmask::ImageBatch;
use wasm_bindgen::prelude::*;

/// Side of the demo images in pixels.
pub const IMAGE_SIZE: usize = 64;

/// RGBA buffer of `width x height` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgba {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgba {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![255; width * height * 4],
        }
    }

    fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let i = (y * self.width + x) * 4;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2], self.pixels[i + 3]]
    }

    fn put(&mut self, x: usize, y: usize, px: [u8; 4]) {
        let i = (y * self.width + x) * 4;
        self.pixels[i..i + 4].copy_from_slice(&px);
    }

    /// Places `tiles` side by side with a 4-pixel white gutter.
    fn strip(tiles: &[Rgba]) -> Self {
        let gap = 4;
        let h = tiles.iter().map(|t| t.height).max().unwrap_or(0);
        let w = tiles.iter().map(|t| t.width).sum::<usize>() + gap * tiles.len().saturating_sub(1);
        let mut out = Rgba::new(w, h);
        let mut x0 = 0;
        for t in tiles {
            for y in 0..t.height {
                for x in 0..t.width {
                    out.put(x0 + x, y, t.pixel(x, y));
                }
            }
            x0 += t.width + gap;
        }
        out
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_rgba(batch: &ImageBatch, i: usize) -> Rgba {
    let s = batch.shape();
    let unit = batch.denormalized_image(i);
    let plane = s.plane();
    let mut out = Rgba::new(s.w, s.h);
    for p in 0..plane {
        let px = [quantize(unit[p]), quantize(unit[plane + p]), quantize(unit[2 * plane + p]), 255];
        out.put(p % s.w, p / s.w, px);
    }
    out
}

fn mask_rgba(mask: &PixelMask) -> Rgba {
    let mut out = Rgba::new(mask.width(), mask.height());
    for (p, &v) in mask.values().iter().enumerate() {
        let g = if v == 1 { 255 } else { 0 };
        out.put(p % mask.width(), p / mask.width(), [g, g, g, 255]);
    }
    out
}

/// Two synthetic shape images of the given classes.
pub fn demo_pair(class_a: usize, class_b: usize, image_seed: u64) -> Result<ImageBatch, String> {
    if class_a >= SHAPE_CLASSES || class_b >= SHAPE_CLASSES {
        return Err(format!("shape classes run from 0 to {}", SHAPE_CLASSES - 1));
    }
    let all = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Shapes,
        classes: SHAPE_CLASSES,
        per_class: 1,
        image_size: IMAGE_SIZE,
        seed: image_seed,
    })
    .map_err(|e| e.to_string())?;
    all.select(&[class_a, class_b]).map_err(|e| e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

/// Mask over a `size x size` canvas and its kept fraction.
pub fn mask_image(grid: usize, ratio: f64, pattern: &str, seed: u64, size: usize) -> Result<(Rgba, f64), String> {
    let mask = gen_mask(parse::<MaskPattern>(pattern)?, grid, ratio, seed).map_err(|e| e.to_string())?;
    let pixels = expand_to_pixels(&mask, size, size).map_err(|e| e.to_string())?;
    Ok((mask_rgba(&pixels), mask.lambda()))
}

/// Strip of `[A, B, mask, mix(A, B), switch(A, B)]`; the switch tile is left
/// blank for erase fills, which have no partner.
pub fn mix_strip(grid: usize, ratio: f64, pattern: &str, fill: &str, seed: u64, class_a: usize, class_b: usize) -> Result<(Rgba, f64), String> {
    let batch = demo_pair(class_a, class_b, seed)?;
    let mask = gen_mask(parse::<MaskPattern>(pattern)?, grid, ratio, seed).map_err(|e| e.to_string())?;
    let pixels = expand_to_pixels(&mask, IMAGE_SIZE, IMAGE_SIZE).map_err(|e| e.to_string())?;
    let fill = match parse::<FillMode>(fill)? {
        FillMode::Gaussian { .. } => FillMode::Gaussian { seed },
        f => f,
    };
    let mixed = mix_batch(&batch, &pixels, &Pairing::reverse(2), fill).map_err(|e| e.to_string())?;
    let switch = if fill == FillMode::Image {
        image_rgba(&switch_batch(&mixed, &batch, &pixels).map_err(|e| e.to_string())?, 0)
    } else {
        Rgba::new(IMAGE_SIZE, IMAGE_SIZE)
    };
    let tiles = [image_rgba(&batch, 0), image_rgba(&batch, 1), mask_rgba(&pixels), image_rgba(&mixed.mixtures, 0), switch];
    Ok((Rgba::strip(&tiles), mixed.lambda))
}

/// Strip of `[A, B, unmix(A, B)]` for mixup (`global`) or a centred cutmix
/// box; returns the effective coefficient.
pub fn unmix_strip(lambda: f64, global: bool, seed: u64, class_a: usize, class_b: usize) -> Result<(Rgba, f64), String> {
    let batch = demo_pair(class_a, class_b, seed)?;
    let out = if global {
        unmix_global_with_lambda(&batch, lambda)
    } else {
        let c = IMAGE_SIZE / 2;
        unmix_local_with_box(&batch, bbox_at(IMAGE_SIZE, IMAGE_SIZE, lambda, c, c))
    }
    .map_err(|e| e.to_string())?;
    let tiles = [image_rgba(&batch, 0), image_rgba(&batch, 1), image_rgba(&out.mixed, 0)];
    Ok((Rgba::strip(&tiles), out.lambda_unmix))
}

/// Pixels plus the coefficient that goes with them.
#[wasm_bindgen]
pub struct Rendered {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    lambda: f64,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// RGBA bytes, row-major.
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
}

fn rendered(r: Result<(Rgba, f64), String>) -> Result<Rendered, JsError> {
    let (img, lambda) = r.map_err(|e| JsError::new(&e))?;
    Ok(Rendered {
        width: img.width,
        height: img.height,
        pixels: img.pixels,
        lambda,
    })
}

#[wasm_bindgen(js_name = renderMask)]
pub fn render_mask(grid: usize, ratio: f64, pattern: &str, seed: u32, size: usize) -> Result<Rendered, JsError> {
    rendered(mask_image(grid, ratio, pattern, seed as u64, size))
}

#[wasm_bindgen(js_name = renderMix)]
pub fn render_mix(grid: usize, ratio: f64, pattern: &str, fill: &str, seed: u32, class_a: usize, class_b: usize) -> Result<Rendered, JsError> {
    rendered(mix_strip(grid, ratio, pattern, fill, seed as u64, class_a, class_b))
}

#[wasm_bindgen(js_name = renderUnmix)]
pub fn render_unmix(lambda: f64, global: bool, seed: u32, class_a: usize, class_b: usize) -> Result<Rendered, JsError> {
    rendered(unmix_strip(lambda, global, seed as u64, class_a, class_b))
}
