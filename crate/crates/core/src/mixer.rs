//! Mixture and switch batches, erase/noise fill baselines, and the global
//! (mixup) and local (cutmix) mixtures used by Un-Mix.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::maskgen::PixelMask;
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairingKind {
    Reverse,
    Random { seed: u64 },
    Identity,
}

/// Partner assignment `i -> perm[i]` inside a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    perm: Vec<usize>,
    kind: PairingKind,
}

impl Pairing {
    pub fn from_perm(perm: Vec<usize>, kind: PairingKind) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("pairing is not a permutation"));
            }
        }
        Ok(Self { perm, kind })
    }

    pub fn reverse(n: usize) -> Self {
        Self {
            perm: (0..n).rev().collect(),
            kind: PairingKind::Reverse,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            kind: PairingKind::Identity,
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn kind(&self) -> PairingKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_reverse(&self) -> bool {
        let n = self.perm.len();
        self.perm.iter().enumerate().all(|(i, &p)| p == n - 1 - i)
    }

    /// `perm(perm(i)) == i` for every `i`.
    pub fn is_involution(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| self.perm[p] == i)
    }

    /// FNV-1a digest of the permutation, for logging.
    pub fn digest(&self) -> u64 {
        self.perm.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &p| {
            (h ^ p as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

pub fn make_pairing(kind: PairingKind, n: usize) -> Result<Pairing> {
    if n == 0 {
        return Err(Error::invalid("pairing needs at least one image"));
    }
    Ok(match kind {
        PairingKind::Reverse => Pairing::reverse(n),
        PairingKind::Identity => Pairing::identity(n),
        PairingKind::Random { seed } => {
            let mut rng = rng::stream(seed, rng::Domain::Pairing, &[n as u64]);
            let mut perm: Vec<usize> = (0..n).collect();
            loop {
                perm.shuffle(&mut rng);
                // For n <= 2 the reverse permutation may be the only non-trivial one.
                if n <= 2 || !perm.iter().enumerate().all(|(i, &p)| p == n - 1 - i) {
                    break;
                }
            }
            Pairing { perm, kind }
        }
    })
}

/// What replaces the `0` region of the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FillMode {
    /// Pixels of the paired image.
    Image,
    /// Zeros in normalized space.
    Zero,
    /// I.i.d. standard normal noise in normalized space.
    Gaussian { seed: u64 },
}

impl std::str::FromStr for FillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FillMode::Image),
            "zero" | "erase" => Ok(FillMode::Zero),
            "gaussian" => Ok(FillMode::Gaussian { seed: 0 }),
            other => Err(Error::invalid(format!(
                "unknown fill mode '{other}' (expected image|zero|gaussian)"
            ))),
        }
    }
}

impl std::fmt::Display for FillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FillMode::Image => "image",
            FillMode::Zero => "zero",
            FillMode::Gaussian { .. } => "gaussian",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixOutput {
    pub mixtures: ImageBatch,
    pub pairing: Pairing,
    pub lambda: f64,
    pub fill_mode: FillMode,
}

fn check_geometry(batch: &ImageBatch, mask: &PixelMask, pairing: &Pairing) -> Result<()> {
    let s = batch.shape();
    if mask.height() != s.h || mask.width() != s.w {
        return Err(Error::shape(format!(
            "mask {}x{} vs images {}x{}",
            mask.height(),
            mask.width(),
            s.h,
            s.w
        )));
    }
    if pairing.len() != s.n {
        return Err(Error::shape(format!(
            "pairing of length {} for batch of {}",
            pairing.len(),
            s.n
        )));
    }
    Ok(())
}

/// `mix_i = m * I_i + (1 - m) * fill_i`, where `fill_i` is `I_perm(i)`, zero
/// or noise depending on `fill_mode`. Selection rather than arithmetic, so
/// every output pixel is bit-identical to its source.
pub fn mix_batch(
    batch: &ImageBatch,
    mask: &PixelMask,
    pairing: &Pairing,
    fill_mode: FillMode,
) -> Result<MixOutput> {
    check_geometry(batch, mask, pairing)?;
    let s = batch.shape();
    let plane = s.plane();
    let m = mask.values();
    let mut out = Vec::with_capacity(s.len());
    let mut noise_rng = match fill_mode {
        FillMode::Gaussian { seed } => Some(rng::stream(seed, rng::Domain::Noise, &[])),
        _ => None,
    };
    for i in 0..s.n {
        let primary = batch.image(i);
        let partner = batch.image(pairing.perm()[i]);
        for (idx, &p) in primary.iter().enumerate() {
            let keep = m[idx % plane] == 1;
            let v = if keep {
                p
            } else {
                match (fill_mode, noise_rng.as_mut()) {
                    (FillMode::Image, _) => partner[idx],
                    (FillMode::Gaussian { .. }, Some(r)) => StandardNormal.sample(r),
                    _ => 0.0,
                }
            };
            out.push(v);
        }
    }
    Ok(MixOutput {
        mixtures: batch.with_data(out)?,
        pairing: pairing.clone(),
        lambda: mask.lambda(),
        fill_mode,
    })
}

/// `switch_i = m * I_perm(i) + (1 - m) * I_i`, materialized explicitly so it
/// is correct for non-involutive pairings too.
pub fn switch_batch(mix_out: &MixOutput, batch: &ImageBatch, mask: &PixelMask) -> Result<ImageBatch> {
    if mix_out.fill_mode != FillMode::Image {
        return Err(Error::invalid("switch images are only defined for image fill"));
    }
    check_geometry(batch, mask, &mix_out.pairing)?;
    if mix_out.mixtures.shape() != batch.shape() {
        return Err(Error::shape("mixture and source batch differ in shape"));
    }
    let s = batch.shape();
    let plane = s.plane();
    let m = mask.values();
    let mut out = Vec::with_capacity(s.len());
    for i in 0..s.n {
        let primary = batch.image(i);
        let partner = batch.image(mix_out.pairing.perm()[i]);
        out.extend(
            (0..primary.len()).map(|idx| if m[idx % plane] == 1 { partner[idx] } else { primary[idx] }),
        );
    }
    batch.with_data(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnmixMode {
    Global,
    Local,
}

/// Pixel box `[x1, x2) x [y1, y2)`; `x` indexes columns, `y` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixOutput {
    pub mixed: ImageBatch,
    pub lambda_unmix: f64,
    pub mode: UnmixMode,
    pub bbox: Option<BBox>,
}

pub fn sample_unmix_lambda(rng: &mut StreamRng) -> f64 {
    Beta::new(1.0, 1.0).expect("valid beta").sample(rng)
}

/// Mixup with the reversed batch: `lam * x + (1 - lam) * reverse(x)`.
pub fn unmix_global_with_lambda(batch: &ImageBatch, lam: f64) -> Result<UnmixOutput> {
    if batch.len() < 2 {
        return Err(Error::invalid("un-mix needs at least two images"));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("lambda {lam} outside [0, 1]")));
    }
    let n = batch.len();
    let a = lam as f32;
    let b = (1.0 - lam) as f32;
    let mut out = Vec::with_capacity(batch.data().len());
    for i in 0..n {
        let x = batch.image(i);
        let r = batch.image(n - 1 - i);
        out.extend(x.iter().zip(r).map(|(&p, &q)| a * p + b * q));
    }
    Ok(UnmixOutput {
        mixed: batch.with_data(out)?,
        lambda_unmix: lam,
        mode: UnmixMode::Global,
        bbox: None,
    })
}

/// Mixup with a coefficient drawn from `Beta(1, 1)` seeded by `seed`.
pub fn unmix_global(batch: &ImageBatch, seed: u64) -> Result<UnmixOutput> {
    let mut rng = rng::stream(seed, rng::Domain::Unmix, &[]);
    unmix_global_with_lambda(batch, sample_unmix_lambda(&mut rng))
}

/// Cut box with side fractions `sqrt(1 - lam)` around `(cy, cx)`, clipped to
/// the image.
pub fn bbox_at(height: usize, width: usize, lam: f64, cy: usize, cx: usize) -> BBox {
    let cut_rat = (1.0 - lam).max(0.0).sqrt();
    let cut_w = (width as f64 * cut_rat) as i64;
    let cut_h = (height as f64 * cut_rat) as i64;
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    BBox {
        x1: clip(cx as i64 - cut_w / 2, width),
        y1: clip(cy as i64 - cut_h / 2, height),
        x2: clip(cx as i64 + cut_w / 2, width),
        y2: clip(cy as i64 + cut_h / 2, height),
    }
}

/// Cut box with a uniformly drawn center.
pub fn rand_bbox(height: usize, width: usize, lam: f64, rng: &mut impl Rng) -> BBox {
    let cx = rng.random_range(0..width);
    let cy = rng.random_range(0..height);
    bbox_at(height, width, lam, cy, cx)
}

/// Pastes the box region of the reversed batch and recomputes the
/// coefficient from the clipped area.
pub fn unmix_local_with_box(batch: &ImageBatch, bbox: BBox) -> Result<UnmixOutput> {
    if batch.len() < 2 {
        return Err(Error::invalid("un-mix needs at least two images"));
    }
    let s = batch.shape();
    if bbox.x2 > s.w || bbox.y2 > s.h || bbox.x1 > bbox.x2 || bbox.y1 > bbox.y2 {
        return Err(Error::invalid(format!("box {bbox:?} outside {}x{}", s.h, s.w)));
    }
    let n = s.n;
    let mut out = batch.data().to_vec();
    let img = s.image_len();
    for i in 0..n {
        let src = batch.image(n - 1 - i);
        for c in 0..s.c {
            for y in bbox.y1..bbox.y2 {
                let row = c * s.plane() + y * s.w;
                out[i * img + row + bbox.x1..i * img + row + bbox.x2]
                    .copy_from_slice(&src[row + bbox.x1..row + bbox.x2]);
            }
        }
    }
    let lambda_unmix = 1.0 - bbox.area() as f64 / (s.h * s.w) as f64;
    Ok(UnmixOutput {
        mixed: batch.with_data(out)?,
        lambda_unmix,
        mode: UnmixMode::Local,
        bbox: Some(bbox),
    })
}

/// Cutmix with the reversed batch.
pub fn unmix_local(batch: &ImageBatch, lam: f64, rng: &mut impl Rng) -> Result<UnmixOutput> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("lambda {lam} outside [0, 1]")));
    }
    let s = batch.shape();
    let bbox = rand_bbox(s.h, s.w, lam, rng);
    unmix_local_with_box(batch, bbox)
}
