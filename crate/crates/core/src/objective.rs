//! InfoNCE with a FIFO key queue, the lambda-weighted MixMask loss, Un-Mix
//! terms and the assembled training objective.
//!
//! Logits go through a GEMM in the embedding precision; the softmax, the
//! log-sum-exp and all reductions run in `f64` with max subtraction.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::Pairing;
use crate::nnet::scalar::{gemm, MatRef, Scalar};
use crate::rng::{self, Domain};

/// Tolerance on the unit-norm invariant of embedding rows.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Pre-normalization norms below this are replaced by the first basis vector.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingRole {
    Query,
    Key,
}

/// `n x dim` L2-normalized rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T = f32> {
    n: usize,
    dim: usize,
    data: Vec<T>,
    role: EmbeddingRole,
}

impl<T: Scalar> EmbeddingBatch<T> {
    /// Wraps rows that are already unit-norm.
    pub fn new(n: usize, dim: usize, data: Vec<T>, role: EmbeddingRole) -> Result<Self> {
        if n == 0 || dim == 0 || data.len() != n * dim {
            return Err(Error::shape(format!(
                "{} values for {n} x {dim} embeddings",
                data.len()
            )));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::invalid(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(Self { n, dim, data, role })
    }

    /// L2-normalizes each row; rows with norm below [`NORM_GUARD`] become `e_0`.
    pub fn normalized(n: usize, dim: usize, mut data: Vec<T>, role: EmbeddingRole) -> Result<Self> {
        if n == 0 || dim == 0 || data.len() != n * dim {
            return Err(Error::shape("embedding buffer does not match n x dim"));
        }
        for row in data.chunks_mut(dim) {
            normalize_row(row);
        }
        Self::new(n, dim, data, role)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_role(mut self, role: EmbeddingRole) -> Self {
        self.role = role;
        self
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            n: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            role: self.role,
        }
    }

    /// Rows gathered at `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            dim: self.dim,
            data,
            role: self.role,
        }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingBatch<U> {
        EmbeddingBatch {
            n: self.n,
            dim: self.dim,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
            role: self.role,
        }
    }
}

/// Returns the pre-normalization norm; writes `e_0` when it is below the guard.
pub(crate) fn normalize_row<T: Scalar>(row: &mut [T]) -> f64 {
    let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm < NORM_GUARD || !norm.is_finite() {
        row.iter_mut().for_each(|v| *v = T::zero());
        row[0] = T::one();
    } else {
        let inv = T::from_f64_lossy(1.0 / norm);
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    norm
}

/// Ring buffer of `capacity` unit-norm keys used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue<T = f32> {
    capacity: usize,
    dim: usize,
    entries: Vec<T>,
    cursor: usize,
    pushed: u64,
}

impl<T: Scalar> KeyQueue<T> {
    /// Queue filled with random unit vectors; they are overwritten by the
    /// first `capacity / batch` pushes.
    pub fn random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue capacity and dim must be positive"));
        }
        let mut rng = rng::stream(seed, Domain::Queue, &[]);
        let mut entries: Vec<T> = (0..capacity * dim)
            .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
            .collect();
        for row in entries.chunks_mut(dim) {
            normalize_row(row);
        }
        Ok(Self {
            capacity,
            dim,
            entries,
            cursor: 0,
            pushed: 0,
        })
    }

    pub fn from_parts(capacity: usize, dim: usize, entries: Vec<T>, cursor: usize, pushed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 || entries.len() != capacity * dim || cursor >= capacity {
            return Err(Error::shape("queue parts are inconsistent"));
        }
        Ok(Self {
            capacity,
            dim,
            entries,
            cursor,
            pushed,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entry(&self, j: usize) -> &[T] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Total keys pushed since creation.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Number of slots holding pushed keys rather than initial random vectors.
    pub fn occupancy(&self) -> usize {
        self.pushed.min(self.capacity as u64) as usize
    }

    /// Overwrites the oldest `keys.len()` entries and advances the cursor.
    pub fn push(&mut self, keys: &EmbeddingBatch<T>) -> Result<()> {
        let n = keys.len();
        if keys.dim() != self.dim {
            return Err(Error::shape(format!(
                "keys of dim {} for queue of dim {}",
                keys.dim(),
                self.dim
            )));
        }
        if n > self.capacity {
            return Err(Error::invalid(format!(
                "batch of {n} keys exceeds queue capacity {}",
                self.capacity
            )));
        }
        if self.capacity % n != 0 {
            return Err(Error::invalid(format!(
                "batch size {n} must divide queue capacity {}",
                self.capacity
            )));
        }
        let start = self.cursor * self.dim;
        self.entries[start..start + n * self.dim].copy_from_slice(keys.data());
        self.cursor = (self.cursor + n) % self.capacity;
        self.pushed += n as u64;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> KeyQueue<U> {
        KeyQueue {
            capacity: self.capacity,
            dim: self.dim,
            entries: self.entries.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
            cursor: self.cursor,
            pushed: self.pushed,
        }
    }
}

/// Functional form of [`KeyQueue::push`].
pub fn queue_push<T: Scalar>(mut queue: KeyQueue<T>, keys: &EmbeddingBatch<T>) -> Result<KeyQueue<T>> {
    queue.push(keys)?;
    Ok(queue)
}

/// `-log softmax(logits)[0]` with max subtraction.
pub fn nll_of_first(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + sum.ln() - logits[0]
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

fn check_inputs<T: Scalar>(
    q: &EmbeddingBatch<T>,
    keys: &EmbeddingBatch<T>,
    positives: &[usize],
    queue: &KeyQueue<T>,
    tau: f64,
) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if q.dim() != keys.dim() || q.dim() != queue.dim() {
        return Err(Error::shape(format!(
            "dims differ: queries {}, keys {}, queue {}",
            q.dim(),
            keys.dim(),
            queue.dim()
        )));
    }
    if positives.len() != q.len() {
        return Err(Error::shape(format!(
            "{} positive indices for {} queries",
            positives.len(),
            q.len()
        )));
    }
    if positives.iter().any(|&p| p >= keys.len()) {
        return Err(Error::shape("positive index out of range"));
    }
    Ok(())
}

/// Batch-mean InfoNCE where query `i` has positive key `keys[positives[i]]`,
/// optionally with the gradient with respect to the query rows.
pub fn info_nce_indexed<T: Scalar>(
    q: &EmbeddingBatch<T>,
    keys: &EmbeddingBatch<T>,
    positives: &[usize],
    queue: &KeyQueue<T>,
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<T>>)> {
    check_inputs(q, keys, positives, queue, tau)?;
    let (n, d, k) = (q.len(), q.dim(), queue.capacity());
    let mut neg = vec![T::zero(); n * k];
    gemm(
        T::one(),
        MatRef::new(q.data(), n, d),
        MatRef::new(queue.entries(), k, d).t(),
        T::zero(),
        &mut neg,
    );
    let inv_tau = 1.0 / tau;
    let mut total = 0.0;
    let mut logits = vec![0.0f64; k + 1];
    let mut probs = if with_grad { vec![T::zero(); n * k] } else { Vec::new() };
    let mut pos_coef = vec![0.0f64; if with_grad { n } else { 0 }];
    for i in 0..n {
        logits[0] = dot(q.row(i), keys.row(positives[i])) * inv_tau;
        for j in 0..k {
            logits[j + 1] = neg[i * k + j].as_f64() * inv_tau;
        }
        let loss = nll_of_first(&logits);
        total += loss;
        if with_grad {
            let lse = loss + logits[0];
            // d loss_i / d q_i = (sum_j p_j key_j - k_pos) / tau, averaged over rows.
            let scale = inv_tau / n as f64;
            pos_coef[i] = ((logits[0] - lse).exp() - 1.0) * scale;
            for j in 0..k {
                probs[i * k + j] = T::from_f64_lossy((logits[j + 1] - lse).exp() * scale);
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("InfoNCE loss {loss}")));
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let mut grad = vec![T::zero(); n * d];
    gemm(
        T::one(),
        MatRef::new(&probs, n, k),
        MatRef::new(queue.entries(), k, d),
        T::zero(),
        &mut grad,
    );
    for i in 0..n {
        let c = T::from_f64_lossy(pos_coef[i]);
        let kp = keys.row(positives[i]);
        for (g, &kv) in grad[i * d..(i + 1) * d].iter_mut().zip(kp) {
            *g += c * kv;
        }
    }
    Ok((loss, Some(grad)))
}

/// Batch-mean InfoNCE with positives `k_pos[i]` for `q[i]`.
pub fn info_nce<T: Scalar>(
    q: &EmbeddingBatch<T>,
    k_pos: &EmbeddingBatch<T>,
    queue: &KeyQueue<T>,
    tau: f64,
) -> Result<f64> {
    if q.len() != k_pos.len() {
        return Err(Error::shape(format!(
            "{} queries vs {} positive keys",
            q.len(),
            k_pos.len()
        )));
    }
    let idx: Vec<usize> = (0..q.len()).collect();
    info_nce_indexed(q, k_pos, &idx, queue, tau, false).map(|(l, _)| l)
}

/// The two lambda-weighted MixMask terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixMaskTerms {
    /// Positive is the key of the mask-kept image `i`.
    pub l_up: f64,
    /// Positive is the key of the partner image `perm(i)`.
    pub l_down: f64,
    pub lambda: f64,
    pub combined: f64,
}

impl MixMaskTerms {
    pub fn new(l_up: f64, l_down: f64, lambda: f64) -> Self {
        Self {
            l_up,
            l_down,
            lambda,
            combined: lambda * l_up + (1.0 - lambda) * l_down,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")))
    }
}

pub fn mixmask_loss<T: Scalar>(
    z_mix: &EmbeddingBatch<T>,
    k: &EmbeddingBatch<T>,
    pairing: &Pairing,
    queue: &KeyQueue<T>,
    tau: f64,
    lambda: f64,
) -> Result<MixMaskTerms> {
    mixmask_loss_grad(z_mix, k, pairing, queue, tau, lambda, false).map(|(t, _)| t)
}

/// MixMask terms and, when requested, `d combined / d z_mix`.
pub fn mixmask_loss_grad<T: Scalar>(
    z_mix: &EmbeddingBatch<T>,
    k: &EmbeddingBatch<T>,
    pairing: &Pairing,
    queue: &KeyQueue<T>,
    tau: f64,
    lambda: f64,
    with_grad: bool,
) -> Result<(MixMaskTerms, Option<Vec<T>>)> {
    check_lambda(lambda)?;
    if pairing.len() != z_mix.len() || k.len() != z_mix.len() {
        return Err(Error::shape("pairing, mixtures and keys differ in length"));
    }
    let identity: Vec<usize> = (0..z_mix.len()).collect();
    let (l_up, g_up) = info_nce_indexed(z_mix, k, &identity, queue, tau, with_grad)?;
    let (l_down, g_down) = info_nce_indexed(z_mix, k, pairing.perm(), queue, tau, with_grad)?;
    let grad = match (g_up, g_down) {
        (Some(up), Some(down)) => {
            let a = T::from_f64_lossy(lambda);
            let b = T::from_f64_lossy(1.0 - lambda);
            Some(up.iter().zip(&down).map(|(&u, &d)| a * u + b * d).collect())
        }
        _ => None,
    };
    Ok((MixMaskTerms::new(l_up, l_down, lambda), grad))
}

/// Un-Mix terms: the mixture against keys in natural and reversed order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnmixTerms {
    pub l_um: f64,
    pub l_um_flip: f64,
    pub lambda: f64,
}

/// Un-Mix terms and, when requested, `d(lam l_um + (1 - lam) l_um_flip) / d z`.
pub fn unmix_loss_grad<T: Scalar>(
    z_unmix: &EmbeddingBatch<T>,
    k: &EmbeddingBatch<T>,
    queue: &KeyQueue<T>,
    tau: f64,
    lambda: f64,
    with_grad: bool,
) -> Result<(UnmixTerms, Option<Vec<T>>)> {
    check_lambda(lambda)?;
    let n = z_unmix.len();
    let reverse = Pairing::reverse(n);
    let (t, g) = mixmask_loss_grad(z_unmix, k, &reverse, queue, tau, lambda, with_grad)?;
    Ok((
        UnmixTerms {
            l_um: t.l_up,
            l_um_flip: t.l_down,
            lambda,
        },
        g,
    ))
}

/// Which optional branches contribute to the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub mixmask: bool,
    pub unmix: bool,
}

/// Inputs to [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_orig: f64,
    pub mixmask: Option<MixMaskTerms>,
    pub unmix: Option<UnmixTerms>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_orig: f64,
    pub l_up: f64,
    pub l_down: f64,
    pub l_um: f64,
    pub l_um_flip: f64,
    pub lambda_mask: f64,
    pub lambda_unmix: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mixmask_contribution(&self) -> f64 {
        self.lambda_mask * self.l_up + (1.0 - self.lambda_mask) * self.l_down
    }

    pub fn unmix_contribution(&self) -> f64 {
        self.lambda_unmix * self.l_um + (1.0 - self.lambda_unmix) * self.l_um_flip
    }
}

/// `l_orig + [lam l_up + (1 - lam) l_down] + [lam_um l_um + (1 - lam_um) l_um_flip]`.
/// Terms of inactive branches are reported as zero.
pub fn total_loss(parts: &LossParts, branches: Branches) -> Result<LossBreakdown> {
    let mut out = LossBreakdown {
        l_orig: parts.l_orig,
        ..Default::default()
    };
    if branches.mixmask {
        let m = parts
            .mixmask
            .ok_or_else(|| Error::invalid("mixmask branch active but its terms are missing"))?;
        check_lambda(m.lambda)?;
        out.l_up = m.l_up;
        out.l_down = m.l_down;
        out.lambda_mask = m.lambda;
    }
    if branches.unmix {
        let u = parts
            .unmix
            .ok_or_else(|| Error::invalid("un-mix branch active but its terms are missing"))?;
        check_lambda(u.lambda)?;
        out.l_um = u.l_um;
        out.l_um_flip = u.l_um_flip;
        out.lambda_unmix = u.lambda;
    }
    let terms = [out.l_orig, out.l_up, out.l_down, out.l_um, out.l_um_flip];
    if terms.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::NonFinite(format!("loss terms {terms:?}")));
    }
    out.total = out.l_orig
        + if branches.mixmask { out.mixmask_contribution() } else { 0.0 }
        + if branches.unmix { out.unmix_contribution() } else { 0.0 };
    Ok(out)
}
