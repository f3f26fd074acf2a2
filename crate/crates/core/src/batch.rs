//! Image batches in `N x C x H x W` layout with per-channel normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel mean/std applied to `[0, 1]` pixel intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid("mean/std must be non-empty and equal length"));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("std entries must be positive and finite"));
        }
        Ok(Self { mean, std })
    }

    /// Published CIFAR-10 training-set statistics.
    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// Published CIFAR-100 training-set statistics.
    pub fn cifar100() -> Self {
        Self {
            mean: vec![0.5071, 0.4865, 0.4409],
            std: vec![0.2673, 0.2564, 0.2762],
        }
    }

    /// Mean 0.5, std 0.25 on every channel; used for synthetic data.
    pub fn centered(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            std: vec![0.25; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn normalize(&self, c: usize, v: f32) -> f32 {
        (v - self.mean[c]) / self.std[c]
    }

    #[inline]
    pub fn denormalize(&self, c: usize, v: f32) -> f32 {
        v * self.std[c] + self.mean[c]
    }

    /// Normalized values of intensities 0 and 1 for channel `c`.
    pub fn valid_range(&self, c: usize) -> (f32, f32) {
        (self.normalize(c, 0.0), self.normalize(c, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl BatchShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of normalized images with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    shape: BatchShape,
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
    norm: Normalization,
}

impl ImageBatch {
    pub fn new(
        shape: BatchShape,
        data: Vec<f32>,
        labels: Option<Vec<u32>>,
        norm: Normalization,
    ) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid(format!("empty batch shape {shape:?}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != shape.n {
                return Err(Error::shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    shape.n
                )));
            }
        }
        if norm.channels() != shape.c {
            return Err(Error::shape(format!(
                "normalization has {} channels, images have {}",
                norm.channels(),
                shape.c
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel value at flat index {i}")));
        }
        Ok(Self {
            shape,
            data,
            labels,
            norm,
        })
    }

    /// Builds a batch from raw `[0, 1]` intensities, normalizing them.
    pub fn from_unit_intensities(
        shape: BatchShape,
        mut data: Vec<f32>,
        labels: Option<Vec<u32>>,
        norm: Normalization,
    ) -> Result<Self> {
        if norm.channels() != shape.c || data.len() != shape.len() {
            return Err(Error::shape("intensity buffer does not match shape"));
        }
        let plane = shape.plane();
        for (idx, v) in data.iter_mut().enumerate() {
            let c = (idx / plane) % shape.c;
            *v = norm.normalize(c, *v);
        }
        Self::new(shape, data, labels, norm)
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.n
    }

    pub fn is_empty(&self) -> bool {
        self.shape.n == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.shape.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.shape.image_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Same metadata, new pixel data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, data, self.labels.clone(), self.norm.clone())
    }

    /// Gathers images (and labels) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("cannot select an empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.shape.image_len());
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::invalid(format!(
                    "index {i} out of range for batch of {}",
                    self.shape.n
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let shape = BatchShape {
            n: indices.len(),
            ..self.shape
        };
        Ok(Self {
            shape,
            data,
            labels,
            norm: self.norm.clone(),
        })
    }

    /// Concatenates batches with identical image geometry and normalization.
    pub fn concat(parts: &[&ImageBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        let mut n = 0;
        for p in parts {
            let s = p.shape();
            if (s.c, s.h, s.w) != (first.shape.c, first.shape.h, first.shape.w)
                || p.norm != first.norm
            {
                return Err(Error::shape("concatenated batches differ in geometry"));
            }
            data.extend_from_slice(&p.data);
            match (&mut labels, &p.labels) {
                (Some(acc), Some(l)) => acc.extend_from_slice(l),
                _ => labels = None,
            }
            n += s.n;
        }
        Self::new(
            BatchShape { n, ..first.shape },
            data,
            labels,
            first.norm.clone(),
        )
    }

    /// Pixel intensities mapped back to `[0, 1]` (unclamped).
    pub fn denormalized_image(&self, i: usize) -> Vec<f32> {
        let plane = self.shape.plane();
        self.image(i)
            .iter()
            .enumerate()
            .map(|(idx, &v)| self.norm.denormalize(idx / plane, v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ImageBatch {
        let shape = BatchShape::new(3, 1, 2, 2);
        let data = (0..12).map(|v| v as f32).collect();
        ImageBatch::new(shape, data, Some(vec![0, 1, 2]), Normalization::centered(1)).unwrap()
    }

    #[test]
    fn select_reorders_images_and_labels() {
        let b = tiny();
        let s = b.select(&[2, 0]).unwrap();
        assert_eq!(s.image(0), b.image(2));
        assert_eq!(s.image(1), b.image(0));
        assert_eq!(s.labels().unwrap(), &[2, 0]);
    }

    #[test]
    fn rejects_wrong_lengths_and_nan() {
        let shape = BatchShape::new(1, 1, 2, 2);
        let norm = Normalization::centered(1);
        assert!(ImageBatch::new(shape, vec![0.0; 3], None, norm.clone()).is_err());
        assert!(ImageBatch::new(shape, vec![0.0, 1.0, f32::NAN, 0.0], None, norm.clone()).is_err());
        assert!(ImageBatch::new(shape, vec![0.0; 4], Some(vec![1, 2]), norm).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization::cifar100();
        for c in 0..3 {
            let v = 0.37f32;
            assert!((n.denormalize(c, n.normalize(c, v)) - v).abs() < 1e-6);
        }
    }
}
