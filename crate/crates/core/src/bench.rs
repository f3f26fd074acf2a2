//! Throughput of mask generation plus mixing, single- and multi-worker.

use std::fmt::Write as _;
use std::time::Instant;

use crate::batch::{BatchShape, ImageBatch, Normalization};
use crate::error::{Error, Result};
use crate::maskgen::{expand_to_pixels, gen_mask, MaskPattern};
use crate::mixer::{mix_batch, FillMode, Pairing};
use crate::rng::{self, Domain};
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub grid_n: usize,
    pub pattern: MaskPattern,
    pub ratio: f64,
    pub fill: FillMode,
    pub iterations: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            image_size: 32,
            grid_n: 8,
            pattern: MaskPattern::Blocked,
            ratio: 0.5,
            fill: FillMode::Image,
            iterations: 20,
            workers: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub workers: usize,
    pub iterations: usize,
    pub images: u64,
    /// Spatial pixels mixed, `images * image_size^2`.
    pub total_pixels: u64,
    pub seconds: f64,
}

impl BenchRow {
    pub fn images_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.images as f64 / self.seconds
        } else {
            0.0
        }
    }

    pub fn ns_per_pixel(&self) -> f64 {
        if self.total_pixels > 0 {
            self.seconds * 1e9 / self.total_pixels as f64
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    /// Single-worker row first, then the multi-worker row when `workers > 1`.
    /// Empty for zero iterations.
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut s = String::from(
            "workers,iterations,batch_size,image_size,grid_n,pattern,fill,images,total_pixels,seconds,images_per_sec,ns_per_pixel\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.6},{:.1},{:.3}",
                r.workers,
                r.iterations,
                c.batch_size,
                c.image_size,
                c.grid_n,
                c.pattern,
                c.fill,
                r.images,
                r.total_pixels,
                r.seconds,
                r.images_per_sec(),
                r.ns_per_pixel()
            );
        }
        s
    }

    /// Multi-worker images/sec over single-worker images/sec.
    pub fn speedup(&self) -> Option<f64> {
        match self.rows.as_slice() {
            [one, many] if one.images_per_sec() > 0.0 => Some(many.images_per_sec() / one.images_per_sec()),
            _ => None,
        }
    }
}

fn random_batch(cfg: &BenchConfig) -> Result<ImageBatch> {
    let shape = BatchShape::new(cfg.batch_size, 3, cfg.image_size, cfg.image_size);
    let mut r = rng::stream(cfg.seed, Domain::Bench, &[]);
    let data = (0..shape.len()).map(|_| StandardNormal.sample(&mut r)).collect();
    ImageBatch::new(shape, data, None, Normalization::centered(3))
}

fn one_iteration(cfg: &BenchConfig, batch: &ImageBatch, pairing: &Pairing, iter: u64) -> Result<f64> {
    let seed = rng::derive_seed(cfg.seed, &[Domain::Bench as u64, iter]);
    let mask = gen_mask(cfg.pattern, cfg.grid_n, cfg.ratio, seed)?;
    let pixels = expand_to_pixels(&mask, cfg.image_size, cfg.image_size)?;
    let out = mix_batch(batch, &pixels, pairing, cfg.fill)?;
    // Keep the result observable so the work is not optimized away.
    Ok(out.mixtures.data()[0] as f64 + out.lambda)
}

fn timed(cfg: &BenchConfig, batch: &ImageBatch, workers: usize) -> Result<BenchRow> {
    let pairing = Pairing::reverse(cfg.batch_size);
    let start = Instant::now();
    let mut sink = 0.0;
    if workers <= 1 {
        for it in 0..cfg.iterations {
            sink += one_iteration(cfg, batch, &pairing, it as u64)?;
        }
    } else {
        let results: Vec<Result<f64>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let pairing = &pairing;
                    scope.spawn(move || {
                        let mut acc = 0.0;
                        for it in (w..cfg.iterations).step_by(workers) {
                            acc += one_iteration(cfg, batch, pairing, it as u64)?;
                        }
                        Ok(acc)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        });
        for r in results {
            sink += r?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    let images = (cfg.iterations * cfg.batch_size) as u64;
    Ok(BenchRow {
        workers,
        iterations: cfg.iterations,
        images,
        total_pixels: images * (cfg.image_size * cfg.image_size) as u64,
        seconds,
    })
}

/// Times `iterations` rounds of mask generation and mixing of one batch.
pub fn bench_mix(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batch_size == 0 || cfg.image_size == 0 || cfg.workers == 0 {
        return Err(Error::invalid("bench needs positive batch size, image size and workers"));
    }
    if cfg.image_size % cfg.grid_n.max(1) != 0 {
        return Err(Error::invalid(format!(
            "grid {} does not divide image size {}",
            cfg.grid_n, cfg.image_size
        )));
    }
    if cfg.iterations == 0 {
        return Ok(BenchReport { config: *cfg, rows: Vec::new() });
    }
    let batch = random_batch(cfg)?;
    let mut rows = vec![timed(cfg, &batch, 1)?];
    if cfg.workers > 1 {
        rows.push(timed(cfg, &batch, cfg.workers)?);
    }
    Ok(BenchReport { config: *cfg, rows })
}
