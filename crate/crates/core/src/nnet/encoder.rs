//! Forward and reverse-mode passes of the convolutional encoder.
//!
//! Activations are kept channel-major (`C x N x H x W`) so that each
//! convolution over the whole batch is a single GEMM against an im2col
//! buffer. Every operation is per-sample, so a sample's embedding does not
//! depend on the rest of the batch.

use super::params::{Activation, EncoderParams, Slots};
use super::scalar::{gemm, MatRef, Scalar};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::objective::{normalize_row, EmbeddingBatch, EmbeddingRole, NORM_GUARD};

const NORM_EPS: f64 = 1e-5;

struct BlockCache<T> {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    col: Vec<T>,
    xhat: Vec<T>,
    rstd: Vec<T>,
    pre_act: Vec<T>,
}

/// Intermediate values recorded by [`forward_tape`] for [`backward_tape`].
pub struct Tape<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    feat: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
    norms: Vec<f64>,
    z: Vec<T>,
}

fn check_batch<T: Scalar>(params: &EncoderParams<T>, batch: &ImageBatch) -> Result<()> {
    let a = params.arch();
    let s = batch.shape();
    if s.c != a.in_channels || s.h != a.image_size || s.w != a.image_size {
        return Err(Error::shape(format!(
            "batch {}x{}x{} does not match encoder input {}x{}x{}",
            s.c, s.h, s.w, a.in_channels, a.image_size, a.image_size
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], cin: usize, n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let ncols = n * ho * wo;
    let mut col = vec![T::zero(); cin * 9 * ncols];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * ncols..][..ncols];
                for img in 0..n {
                    let src = &x[(c * n + img) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..][..w];
                        let dst = &mut row[(img * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(dcol: &[T], cin: usize, n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let ncols = n * ho * wo;
    let mut dx = vec![T::zero(); cin * n * h * w];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[(c * 9 + ky * 3 + kx) * ncols..][..ncols];
                for img in 0..n {
                    let dst = &mut dx[(c * n + img) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..][..w];
                        let src = &row[(img * ho + oy) * wo..][..wo];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn to_channel_major<T: Scalar>(batch: &ImageBatch) -> Vec<T> {
    let s = batch.shape();
    let plane = s.plane();
    let mut x = vec![T::zero(); s.len()];
    for img in 0..s.n {
        let src = batch.image(img);
        for c in 0..s.c {
            for (d, &v) in x[(c * s.n + img) * plane..][..plane]
                .iter_mut()
                .zip(&src[c * plane..][..plane])
            {
                *d = T::of_f32(v);
            }
        }
    }
    x
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Output {
    Embedding,
    Features,
}

fn run<T: Scalar>(params: &EncoderParams<T>, batch: &ImageBatch, keep: bool) -> Result<(EmbeddingBatch<T>, Option<Tape<T>>)> {
    run_to(params, batch, keep, Output::Embedding)
}

fn run_to<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &ImageBatch,
    keep: bool,
    output: Output,
) -> Result<(EmbeddingBatch<T>, Option<Tape<T>>)> {
    check_batch(params, batch)?;
    let arch = params.arch();
    let act = arch.activation;
    let n = batch.len();
    let mut x: Vec<T> = to_channel_major(batch);
    let (mut cin, mut h, mut w) = (arch.in_channels, arch.image_size, arch.image_size);
    let mut caches = Vec::new();

    for (b, &cout) in arch.widths.iter().enumerate() {
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let s = ho * wo;
        let ncols = n * s;
        let col = im2col(&x, cin, n, h, w, ho, wo);
        let weight = &params.tensor(Slots::conv_w(b)).data;
        let bias = &params.tensor(Slots::conv_b(b)).data;
        let mut y = vec![T::zero(); cout * ncols];
        gemm(
            T::one(),
            MatRef::new(weight, cout, cin * 9),
            MatRef::new(&col, cin * 9, ncols),
            T::zero(),
            &mut y,
        );
        for (c, chunk) in y.chunks_mut(ncols).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }

        let groups = arch.groups;
        let cg = cout / groups;
        let m = (cg * s) as f64;
        let scale = &params.tensor(Slots::scale(b)).data;
        let shift = &params.tensor(Slots::shift(b)).data;
        let mut rstd = vec![T::zero(); n * groups];
        // y becomes xhat in place.
        for img in 0..n {
            for g in 0..groups {
                let (mut sum, mut sq) = (0.0f64, 0.0f64);
                for c in g * cg..(g + 1) * cg {
                    for &v in &y[c * ncols + img * s..][..s] {
                        let v = v.as_f64();
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                let r = 1.0 / (var + NORM_EPS).sqrt();
                rstd[img * groups + g] = T::from_f64_lossy(r);
                let (mean_t, r_t) = (T::from_f64_lossy(mean), T::from_f64_lossy(r));
                for c in g * cg..(g + 1) * cg {
                    for v in &mut y[c * ncols + img * s..][..s] {
                        *v = (*v - mean_t) * r_t;
                    }
                }
            }
        }
        let mut pre_act = vec![T::zero(); cout * ncols];
        let mut out = vec![T::zero(); cout * ncols];
        for c in 0..cout {
            for j in 0..ncols {
                let u = scale[c] * y[c * ncols + j] + shift[c];
                pre_act[c * ncols + j] = u;
                out[c * ncols + j] = act.apply(u);
            }
        }
        if keep {
            caches.push(BlockCache {
                cin,
                h,
                w,
                ho,
                wo,
                col,
                xhat: y,
                rstd,
                pre_act,
            });
        }
        x = out;
        cin = cout;
        h = ho;
        w = wo;
    }

    // Global average pool: feat is N x C.
    let s = h * w;
    let c_last = cin;
    let mut feat = vec![T::zero(); n * c_last];
    let inv_s = T::from_f64_lossy(1.0 / s as f64);
    for c in 0..c_last {
        for img in 0..n {
            let mut acc = T::zero();
            for &v in &x[(c * n + img) * s..][..s] {
                acc += v;
            }
            feat[img * c_last + c] = acc * inv_s;
        }
    }

    if output == Output::Features {
        for row in feat.chunks_mut(c_last) {
            normalize_row(row);
        }
        if feat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder produced non-finite features".into()));
        }
        return Ok((EmbeddingBatch::new(n, c_last, feat, EmbeddingRole::Query)?, None));
    }

    let blocks = arch.blocks();
    let (hid, emb) = (arch.hidden_dim, arch.embed_dim);
    let mut h1 = vec![T::zero(); n * hid];
    gemm(
        T::one(),
        MatRef::new(&feat, n, c_last),
        MatRef::new(&params.tensor(Slots::fc1_w(blocks)).data, hid, c_last).t(),
        T::zero(),
        &mut h1,
    );
    let b1 = &params.tensor(Slots::fc1_b(blocks)).data;
    for row in h1.chunks_mut(hid) {
        row.iter_mut().zip(b1).for_each(|(v, &b)| *v += b);
    }
    let a1: Vec<T> = h1.iter().map(|&v| act.apply(v)).collect();
    let mut z = vec![T::zero(); n * emb];
    gemm(
        T::one(),
        MatRef::new(&a1, n, hid),
        MatRef::new(&params.tensor(Slots::fc2_w(blocks)).data, emb, hid).t(),
        T::zero(),
        &mut z,
    );
    let b2 = &params.tensor(Slots::fc2_b(blocks)).data;
    let mut norms = Vec::with_capacity(n);
    for row in z.chunks_mut(emb) {
        row.iter_mut().zip(b2).for_each(|(v, &b)| *v += b);
        norms.push(normalize_row(row));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder produced non-finite embeddings".into()));
    }
    let emb_batch = EmbeddingBatch::new(n, emb, z.clone(), EmbeddingRole::Query)?;
    let tape = keep.then(|| Tape {
        n,
        blocks: caches,
        feat,
        h1,
        a1,
        norms,
        z,
    });
    Ok((emb_batch, tape))
}

/// Embeds a batch; rows are L2-normalized.
pub fn forward<T: Scalar>(params: &EncoderParams<T>, batch: &ImageBatch) -> Result<EmbeddingBatch<T>> {
    run(params, batch, false).map(|(e, _)| e)
}

/// L2-normalized pooled backbone features, before the projection head.
pub fn features<T: Scalar>(params: &EncoderParams<T>, batch: &ImageBatch) -> Result<EmbeddingBatch<T>> {
    run_to(params, batch, false, Output::Features).map(|(e, _)| e)
}

fn chunked<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &ImageBatch,
    chunk: usize,
    dim: usize,
    f: fn(&EncoderParams<T>, &ImageBatch) -> Result<EmbeddingBatch<T>>,
) -> Result<EmbeddingBatch<T>> {
    let n = batch.len();
    if n <= chunk {
        return f(params, batch);
    }
    let mut data = Vec::with_capacity(n * dim);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        data.extend_from_slice(f(params, &batch.select(&idx)?)?.data());
    }
    EmbeddingBatch::new(n, dim, data, EmbeddingRole::Query)
}

/// Embeds a batch in chunks of at most `chunk` images.
pub fn forward_chunked<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &ImageBatch,
    chunk: usize,
) -> Result<EmbeddingBatch<T>> {
    chunked(params, batch, chunk, params.arch().embed_dim, forward)
}

/// [`features`] in chunks of at most `chunk` images.
pub fn features_chunked<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &ImageBatch,
    chunk: usize,
) -> Result<EmbeddingBatch<T>> {
    let dim = *params.arch().widths.last().expect("at least one block");
    chunked(params, batch, chunk, dim, features)
}

/// Embeds a batch and records what the backward pass needs.
pub fn forward_tape<T: Scalar>(params: &EncoderParams<T>, batch: &ImageBatch) -> Result<(EmbeddingBatch<T>, Tape<T>)> {
    run(params, batch, true).map(|(e, t)| (e, t.expect("tape recorded")))
}

/// Gradients of all parameters given `d loss / d embeddings` (`N x embed_dim`).
pub fn backward_tape<T: Scalar>(params: &EncoderParams<T>, tape: &Tape<T>, d_embed: &[T]) -> Result<EncoderParams<T>> {
    let arch = params.arch();
    let act: Activation = arch.activation;
    let n = tape.n;
    let (hid, emb) = (arch.hidden_dim, arch.embed_dim);
    if d_embed.len() != n * emb {
        return Err(Error::shape(format!(
            "embedding gradient has {} values, expected {}",
            d_embed.len(),
            n * emb
        )));
    }
    let blocks = arch.blocks();
    let mut grads = params.zeros_like();

    // Through the L2 normalization: (dz - z (z . dz)) / |o|.
    let mut d_out = vec![T::zero(); n * emb];
    for i in 0..n {
        if tape.norms[i] < NORM_GUARD {
            continue;
        }
        let z = &tape.z[i * emb..][..emb];
        let dz = &d_embed[i * emb..][..emb];
        let proj = z.iter().zip(dz).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let inv = T::from_f64_lossy(1.0 / tape.norms[i]);
        for j in 0..emb {
            d_out[i * emb + j] = (dz[j] - z[j] * proj) * inv;
        }
    }

    // Head.
    let w2 = &params.tensor(Slots::fc2_w(blocks)).data;
    gemm(
        T::one(),
        MatRef::new(&d_out, n, emb).t(),
        MatRef::new(&tape.a1, n, hid),
        T::zero(),
        &mut grads.tensors_mut()[Slots::fc2_w(blocks)].data,
    );
    column_sums(&d_out, n, emb, &mut grads.tensors_mut()[Slots::fc2_b(blocks)].data);
    let mut dh1 = vec![T::zero(); n * hid];
    gemm(T::one(), MatRef::new(&d_out, n, emb), MatRef::new(w2, emb, hid), T::zero(), &mut dh1);
    for (g, &h) in dh1.iter_mut().zip(&tape.h1) {
        *g *= act.derivative(h);
    }
    let c_last = *arch.widths.last().expect("at least one block");
    gemm(
        T::one(),
        MatRef::new(&dh1, n, hid).t(),
        MatRef::new(&tape.feat, n, c_last),
        T::zero(),
        &mut grads.tensors_mut()[Slots::fc1_w(blocks)].data,
    );
    column_sums(&dh1, n, hid, &mut grads.tensors_mut()[Slots::fc1_b(blocks)].data);
    let mut dfeat = vec![T::zero(); n * c_last];
    gemm(
        T::one(),
        MatRef::new(&dh1, n, hid),
        MatRef::new(&params.tensor(Slots::fc1_w(blocks)).data, hid, c_last),
        T::zero(),
        &mut dfeat,
    );

    // Global average pool.
    let last = tape.blocks.last().expect("at least one block");
    let s_last = last.ho * last.wo;
    let inv_s = T::from_f64_lossy(1.0 / s_last as f64);
    let mut d_act = vec![T::zero(); c_last * n * s_last];
    for c in 0..c_last {
        for img in 0..n {
            let g = dfeat[img * c_last + c] * inv_s;
            d_act[(c * n + img) * s_last..][..s_last].iter_mut().for_each(|v| *v = g);
        }
    }

    for b in (0..blocks).rev() {
        let cache = &tape.blocks[b];
        let cout = arch.widths[b];
        let s = cache.ho * cache.wo;
        let ncols = n * s;
        let scale = &params.tensor(Slots::scale(b)).data;

        // Activation, then the affine part of the norm.
        let mut dxhat = d_act;
        let (mut dscale, mut dshift) = (vec![T::zero(); cout], vec![T::zero(); cout]);
        for c in 0..cout {
            for j in c * ncols..(c + 1) * ncols {
                let du = dxhat[j] * act.derivative(cache.pre_act[j]);
                dscale[c] += du * cache.xhat[j];
                dshift[c] += du;
                dxhat[j] = du * scale[c];
            }
        }
        grads.tensors_mut()[Slots::scale(b)].data = dscale;
        grads.tensors_mut()[Slots::shift(b)].data = dshift;

        // Normalization statistics; dxhat becomes dy in place.
        let groups = arch.groups;
        let cg = cout / groups;
        let m = (cg * s) as f64;
        for img in 0..n {
            for g in 0..groups {
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for c in g * cg..(g + 1) * cg {
                    let off = c * ncols + img * s;
                    for j in off..off + s {
                        s1 += dxhat[j].as_f64();
                        s2 += (dxhat[j] * cache.xhat[j]).as_f64();
                    }
                }
                let r = cache.rstd[img * groups + g];
                let (m1, m2) = (T::from_f64_lossy(s1 / m), T::from_f64_lossy(s2 / m));
                for c in g * cg..(g + 1) * cg {
                    let off = c * ncols + img * s;
                    for j in off..off + s {
                        dxhat[j] = r * (dxhat[j] - m1 - cache.xhat[j] * m2);
                    }
                }
            }
        }
        let dy = dxhat;

        let k = cache.cin * 9;
        gemm(
            T::one(),
            MatRef::new(&dy, cout, ncols),
            MatRef::new(&cache.col, k, ncols).t(),
            T::zero(),
            &mut grads.tensors_mut()[Slots::conv_w(b)].data,
        );
        let db = &mut grads.tensors_mut()[Slots::conv_b(b)].data;
        for (c, row) in dy.chunks(ncols).enumerate() {
            db[c] = row.iter().fold(T::zero(), |a, &v| a + v);
        }
        if b == 0 {
            break;
        }
        let mut dcol = vec![T::zero(); k * ncols];
        gemm(
            T::one(),
            MatRef::new(&params.tensor(Slots::conv_w(b)).data, cout, k).t(),
            MatRef::new(&dy, cout, ncols),
            T::zero(),
            &mut dcol,
        );
        d_act = col2im(&dcol, cache.cin, n, cache.h, cache.w, cache.ho, cache.wo);
    }
    Ok(grads)
}

fn column_sums<T: Scalar>(m: &[T], rows: usize, cols: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&m[r * cols..][..cols]) {
            *o += v;
        }
    }
}

/// Runs forward, asks `loss_fn` for the loss and `d loss / d embeddings`,
/// and returns the loss with parameter gradients.
pub fn backward<T, F>(params: &EncoderParams<T>, batch: &ImageBatch, loss_fn: F) -> Result<(f64, EncoderParams<T>)>
where
    T: Scalar,
    F: FnOnce(&EmbeddingBatch<T>) -> Result<(f64, Vec<T>)>,
{
    let (emb, tape) = forward_tape(params, batch)?;
    let (loss, d_embed) = loss_fn(&emb)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let grads = backward_tape(params, &tape, &d_embed)?;
    Ok((loss, grads))
}
