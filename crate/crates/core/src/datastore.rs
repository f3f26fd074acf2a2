//! Dataset ingestion (CIFAR binary records, synthetic generators), PNG
//! previews and dataset spec strings.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{BatchShape, ImageBatch, Normalization};
use crate::error::{Error, Result};
use crate::maskgen::PixelMask;
use crate::rng::{self, Domain};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// `<label><3072 pixels>`.
    Cifar10,
    /// `<coarse><fine><3072 pixels>`, coarse label used.
    Coarse,
    /// `<coarse><fine><3072 pixels>`, fine label used.
    Fine,
}

impl CifarVariant {
    pub fn record_size(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Coarse | CifarVariant::Fine => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> u32 {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Coarse => 20,
            CifarVariant::Fine => 100,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            CifarVariant::Cifar10 => Normalization::cifar10(),
            _ => Normalization::cifar100(),
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "coarse" | "cifar100-coarse" => Ok(CifarVariant::Coarse),
            "fine" | "cifar100" | "cifar100-fine" => Ok(CifarVariant::Fine),
            other => Err(Error::invalid(format!("unknown CIFAR variant '{other}'"))),
        }
    }
}

/// One raw record. `coarse` is ignored for [`CifarVariant::Cifar10`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse: u8,
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parses records; the byte length must be an exact multiple of the record size.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<Vec<CifarRecord>> {
    let size = variant.record_size();
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() || bytes.len() % size != 0 {
        return Err(corrupt(format!(
            "{} bytes is not a whole number of {size}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(size)
        .enumerate()
        .map(|(i, rec)| {
            let (coarse, label, pixels) = match variant {
                CifarVariant::Cifar10 => (0, rec[0], &rec[1..]),
                CifarVariant::Coarse => (rec[0], rec[0], &rec[2..]),
                CifarVariant::Fine => (rec[0], rec[1], &rec[2..]),
            };
            if u32::from(label) >= variant.classes() {
                return Err(corrupt(format!("record {i}: label {label} out of range")));
            }
            Ok(CifarRecord {
                coarse,
                label,
                pixels: pixels.to_vec(),
            })
        })
        .collect()
}

pub fn records_to_batch(records: &[CifarRecord], norm: &Normalization) -> Result<ImageBatch> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let shape = BatchShape::new(records.len(), 3, 32, 32);
    let mut data = Vec::with_capacity(shape.len());
    for r in records {
        data.extend(r.pixels.iter().map(|&b| b as f32 / 255.0));
    }
    let labels = records.iter().map(|r| r.label as u32).collect();
    ImageBatch::from_unit_intensities(shape, data, Some(labels), norm.clone())
}

/// Reads a CIFAR binary file into a normalized, labelled batch.
pub fn read_cifar(path: impl AsRef<Path>, variant: CifarVariant, norm: &Normalization) -> Result<ImageBatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    records_to_batch(&parse_cifar(&bytes, variant, path)?, norm)
}

pub fn encode_cifar(records: &[CifarRecord], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * variant.record_size());
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(Error::shape(format!("record has {} pixel bytes", r.pixels.len())));
        }
        match variant {
            CifarVariant::Cifar10 => out.push(r.label),
            CifarVariant::Coarse => out.extend([r.label, 0]),
            CifarVariant::Fine => out.extend([r.coarse, r.label]),
        }
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}

pub fn write_cifar(path: impl AsRef<Path>, records: &[CifarRecord], variant: CifarVariant) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar(records, variant)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Each class is a smooth random prototype plus pixel noise.
    GaussianClusters,
    /// Class `c` shows vertical stripes of period `c + 2` pixels.
    StripedClasses,
    /// Ten shape classes drawn at random position, scale and colour on
    /// textured backgrounds; a small natural-image stand-in.
    Shapes,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-clusters" | "clusters" => Ok(SyntheticKind::GaussianClusters),
            "striped-classes" | "stripes" => Ok(SyntheticKind::StripedClasses),
            "shapes" => Ok(SyntheticKind::Shapes),
            other => Err(Error::invalid(format!("unknown synthetic kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Number of shape classes [`SyntheticKind::Shapes`] can draw.
pub const SHAPE_CLASSES: usize = 10;

const PROTOTYPE_SEED: u64 = 0x5eed;

/// Generates `classes * per_class` images; sample `i` has class `i % classes`.
/// The seed selects samples; class identities are the same for every seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<ImageBatch> {
    if spec.classes == 0 || spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::invalid("synthetic spec has an empty dimension"));
    }
    if spec.kind == SyntheticKind::Shapes && spec.classes > SHAPE_CLASSES {
        return Err(Error::invalid(format!("shapes supports at most {SHAPE_CLASSES} classes")));
    }
    let n = spec.classes * spec.per_class;
    let s = spec.image_size;
    let shape = BatchShape::new(n, 3, s, s);
    // Prototypes depend on the class only, so sets drawn with different seeds
    // share their classes.
    let protos: Vec<Vec<f32>> = match spec.kind {
        SyntheticKind::GaussianClusters => (0..spec.classes)
            .map(|c| smooth_field(&mut rng::stream(PROTOTYPE_SEED, Domain::Synthetic, &[u64::MAX, c as u64]), s))
            .collect(),
        _ => Vec::new(),
    };
    let mut data = Vec::with_capacity(shape.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mut r = rng::stream(spec.seed, Domain::Synthetic, &[i as u64]);
        let img = match spec.kind {
            SyntheticKind::GaussianClusters => {
                let noise = Normal::new(0.0f32, 0.08).expect("valid std");
                protos[class]
                    .iter()
                    .map(|&v| (v + noise.sample(&mut r)).clamp(0.0, 1.0))
                    .collect()
            }
            SyntheticKind::StripedClasses => stripes(&mut r, s, class + 2),
            SyntheticKind::Shapes => draw_shape(&mut r, s, class),
        };
        data.extend(img);
        labels.push(class as u32);
    }
    ImageBatch::from_unit_intensities(shape, data, Some(labels), Normalization::centered(3))
}

/// Sum of a few low-frequency plane waves per channel, in `[0.1, 0.9]`.
fn smooth_field(r: &mut impl Rng, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * s * s];
    for c in 0..3 {
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    r.random_range(-3.0..3.0),
                    r.random_range(-3.0..3.0),
                    r.random_range(0.0..std::f32::consts::TAU),
                    r.random_range(0.05..0.15),
                )
            })
            .collect();
        let base: f32 = r.random_range(0.35..0.65);
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
                let val: f32 = waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum();
                out[c * s * s + y * s + x] = (base + val).clamp(0.1, 0.9);
            }
        }
    }
    out
}

fn stripes(r: &mut impl Rng, s: usize, period: usize) -> Vec<f32> {
    let phase = r.random_range(0.0..std::f32::consts::TAU);
    let color: [f32; 3] = [r.random_range(0.5..1.0), r.random_range(0.5..1.0), r.random_range(0.5..1.0)];
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let mut out = vec![0.0f32; 3 * s * s];
    for (c, &col) in color.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let wave = (std::f32::consts::TAU * x as f32 / period as f32 + phase).cos();
                let v = 0.5 + 0.4 * col * wave + noise.sample(r);
                out[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// A class palette colour perturbed per image by up to `spread` per channel.
fn palette_color(r: &mut impl Rng, class: usize, slot: u64, spread: f32) -> [f32; 3] {
    let mut p = rng::stream(PROTOTYPE_SEED, Domain::Synthetic, &[u64::MAX - 1, class as u64, slot]);
    std::array::from_fn(|_| {
        let base: f32 = p.random_range(0.15..0.85);
        (base + r.random_range(-spread..spread)).clamp(0.0, 1.0)
    })
}

/// Whether normalized coordinates `(u, v)` in `[-1, 1]^2` lie inside shape `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r < 0.9,                                            // disk
        1 => u.abs() < 0.75 && v.abs() < 0.75,                   // square
        2 => v > -0.8 && v < 0.8 && u.abs() < (0.8 - v) * 0.55,  // triangle, apex up
        3 => r < 0.95 && r > 0.55,                               // ring
        4 => (u.abs() < 0.25 && v.abs() < 0.9) || (v.abs() < 0.25 && u.abs() < 0.9), // plus
        5 => ((u - v).abs() < 0.3 || (u + v).abs() < 0.3) && r < 1.1,                 // cross
        6 => v.abs() < 0.9 && u.abs() < 0.9 && ((v + 0.9) * 2.5).floor() as i32 % 2 == 0, // horizontal bars
        7 => u.abs() + v.abs() < 0.95,                           // diamond
        8 => u.abs() < 0.9 && v.abs() < 0.9 && (((u + 0.9) * 2.5).floor() as i32 + ((v + 0.9) * 2.5).floor() as i32) % 2 == 0, // checker
        _ => v.abs() < 0.35 && u.abs() < 0.95,                   // bar
    }
}

fn draw_shape(r: &mut impl Rng, s: usize, class: usize) -> Vec<f32> {
    let bg_a = palette_color(r, class, 0, 0.35);
    let bg_b = palette_color(r, class, 1, 0.35);
    let fg = palette_color(r, class, 2, 0.35);
    let angle = r.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let scale = r.random_range(0.28..0.45) * s as f32;
    let cx = s as f32 / 2.0 + r.random_range(-0.2..0.2) * s as f32;
    let cy = s as f32 / 2.0 + r.random_range(-0.2..0.2) * s as f32;
    let tilt = r.random_range(-0.3f32..0.3);
    let (ct, st) = (tilt.cos(), tilt.sin());
    let noise = Normal::new(0.0f32, 0.04).expect("valid std");
    let mut out = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = 0.5 + 0.5 * ((fx * ca + fy * sa) / s as f32 * 2.0 - 1.0).clamp(-1.0, 1.0);
            let (du, dv) = ((fx - cx) / scale, (fy - cy) / scale);
            let (u, v) = (du * ct + dv * st, -du * st + dv * ct);
            let hit = inside(class, u, v);
            for c in 0..3 {
                let base = if hit { fg[c] } else { bg_a[c] * (1.0 - t) + bg_b[c] * t };
                out[c * s * s + y * s + x] = (base + noise.sample(r)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Where a dataset comes from, parsed from strings such as
/// `cifar10:path=data_batch_1.bin,limit=2000` or
/// `synthetic:kind=shapes,classes=10,per_class=200,size=32,seed=0`.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Cifar {
        variant: CifarVariant,
        paths: Vec<PathBuf>,
        limit: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

impl std::str::FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = Vec::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad dataset option '{part}' in '{s}'")))?;
            kv.push((k.trim(), v.trim()));
        }
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad number '{v}' in dataset spec '{s}'")))
        };
        if head == "synthetic" {
            let mut spec = SyntheticSpec {
                kind: SyntheticKind::Shapes,
                classes: 10,
                per_class: 100,
                image_size: 32,
                seed: 0,
            };
            for (k, v) in kv {
                match k {
                    "kind" => spec.kind = v.parse()?,
                    "classes" => spec.classes = num(v)? as usize,
                    "per_class" => spec.per_class = num(v)? as usize,
                    "size" => spec.image_size = num(v)? as usize,
                    "seed" => spec.seed = num(v)?,
                    _ => return Err(Error::invalid(format!("unknown synthetic option '{k}'"))),
                }
            }
            return Ok(DatasetSpec::Synthetic(spec));
        }
        let variant: CifarVariant = head.parse()?;
        let mut paths = Vec::new();
        let mut limit = None;
        for (k, v) in kv {
            match k {
                "path" => paths.push(PathBuf::from(v)),
                "limit" => limit = Some(num(v)? as usize),
                _ => return Err(Error::invalid(format!("unknown CIFAR option '{k}'"))),
            }
        }
        if paths.is_empty() {
            return Err(Error::invalid(format!("dataset spec '{s}' needs path=FILE")));
        }
        Ok(DatasetSpec::Cifar { variant, paths, limit })
    }
}

impl std::fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSpec::Synthetic(s) => {
                let kind = match s.kind {
                    SyntheticKind::GaussianClusters => "gaussian-clusters",
                    SyntheticKind::StripedClasses => "striped-classes",
                    SyntheticKind::Shapes => "shapes",
                };
                write!(
                    f,
                    "synthetic:kind={kind},classes={},per_class={},size={},seed={}",
                    s.classes, s.per_class, s.image_size, s.seed
                )
            }
            DatasetSpec::Cifar { variant, paths, limit } => {
                let v = match variant {
                    CifarVariant::Cifar10 => "cifar10",
                    CifarVariant::Coarse => "cifar100-coarse",
                    CifarVariant::Fine => "cifar100-fine",
                };
                write!(f, "{v}:")?;
                let mut parts: Vec<String> = paths.iter().map(|p| format!("path={}", p.display())).collect();
                if let Some(l) = limit {
                    parts.push(format!("limit={l}"));
                }
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Loads the dataset a spec describes. CIFAR files are concatenated in
/// order and truncated to `limit` records.
pub fn load_dataset(spec: &DatasetSpec) -> Result<ImageBatch> {
    match spec {
        DatasetSpec::Synthetic(s) => gen_synthetic(s),
        DatasetSpec::Cifar { variant, paths, limit } => {
            let mut records = Vec::new();
            for p in paths {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                records.extend(parse_cifar(&bytes, *variant, p)?);
                if limit.is_some_and(|l| records.len() >= l) {
                    break;
                }
            }
            if let Some(l) = limit {
                records.truncate(*l);
            }
            records_to_batch(&records, &variant.normalization())
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// 8-bit RGB (or gray for one channel) PNG bytes of image `i`, denormalized
/// with the batch's own constants and clamped.
pub fn image_png_bytes(batch: &ImageBatch, i: usize) -> Result<Vec<u8>> {
    let s = batch.shape();
    let plane = s.plane();
    let unit = batch.denormalized_image(i);
    let (color, pixels) = match s.c {
        1 => (png::ColorType::Grayscale, unit.iter().map(|&v| quantize(v)).collect()),
        3 => {
            let mut px = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    px.push(quantize(unit[c * plane + p]));
                }
            }
            (png::ColorType::Rgb, px)
        }
        c => return Err(Error::invalid(format!("cannot write {c}-channel images as PNG"))),
    };
    encode_png(s.w, s.h, color, &pixels)
}

/// 8-bit gray PNG bytes of a mask: 0 is black, 1 is white.
pub fn mask_png_bytes(mask: &PixelMask) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.values().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    encode_png(mask.width(), mask.height(), png::ColorType::Grayscale, &px)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image_png(batch: &ImageBatch, i: usize, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &image_png_bytes(batch, i)?)
}

pub fn write_mask_png(mask: &PixelMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &mask_png_bytes(mask)?)
}

/// Decoded 8-bit image, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette".into())),
    };
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

pub fn read_png(path: impl AsRef<Path>) -> Result<DecodedPng> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Turns decoded PNGs of equal size into a normalized RGB batch; gray is
/// replicated and alpha dropped.
pub fn pngs_to_batch(images: &[DecodedPng], norm: &Normalization) -> Result<ImageBatch> {
    let first = images.first().ok_or_else(|| Error::invalid("no images"))?;
    let (h, w) = (first.height, first.width);
    let shape = BatchShape::new(images.len(), 3, h, w);
    let mut data = Vec::with_capacity(shape.len());
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape(format!(
                "images differ in size: {}x{} vs {h}x{w}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            for p in 0..h * w {
                let src = match img.channels {
                    1 | 2 => img.pixels[p * img.channels],
                    _ => img.pixels[p * img.channels + c],
                };
                data.push(src as f32 / 255.0);
            }
        }
    }
    ImageBatch::from_unit_intensities(shape, data, None, norm.clone())
}
