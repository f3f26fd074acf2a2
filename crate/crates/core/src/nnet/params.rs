use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`: a smooth member of the ReLU family, so finite
    /// differences see no kinks.
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        })
    }
}

/// Encoder architecture: `widths.len()` blocks of stride-2 3x3 convolution,
/// group norm and activation, then global average pooling and a two-layer
/// projection head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub groups: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            widths: vec![32, 64, 128, 256],
            groups: 8,
            hidden_dim: 256,
            embed_dim: 128,
            activation: Activation::Silu,
        }
    }
}

impl ArchConfig {
    /// A few-hundred-parameter variant for gradient checks and fast tests.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            in_channels: 3,
            image_size,
            widths: vec![4, 6, 8],
            groups: 2,
            hidden_dim: 8,
            embed_dim: 6,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_size == 0 || self.widths.is_empty() {
            return Err(Error::invalid("architecture has an empty dimension"));
        }
        if self.groups == 0 || self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return Err(Error::invalid(format!(
                "groups {} must divide every width {:?}",
                self.groups, self.widths
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        Ok(())
    }

    /// Spatial sizes after each block.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = self.image_size;
        self.widths
            .iter()
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }

    /// Canonical one-line form, stored in checkpoint manifests.
    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "in={} size={} widths={} groups={} hidden={} embed={} act={}",
            self.in_channels,
            self.image_size,
            widths.join(","),
            self.groups,
            self.hidden_dim,
            self.embed_dim,
            self.activation
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut cfg = ArchConfig {
            widths: Vec::new(),
            ..Default::default()
        };
        let bad = || Error::invalid(format!("bad architecture line '{line}'"));
        let mut seen = 0;
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k {
                "in" => cfg.in_channels = num(v)?,
                "size" => cfg.image_size = num(v)?,
                "widths" => {
                    cfg.widths = v.split(',').map(num).collect::<Result<_>>()?;
                }
                "groups" => cfg.groups = num(v)?,
                "hidden" => cfg.hidden_dim = num(v)?,
                "embed" => cfg.embed_dim = num(v)?,
                "act" => cfg.activation = v.parse()?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(bad());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push((format!("block{i}.conv.weight"), vec![w, cin, 3, 3]));
            specs.push((format!("block{i}.conv.bias"), vec![w]));
            specs.push((format!("block{i}.norm.scale"), vec![w]));
            specs.push((format!("block{i}.norm.shift"), vec![w]));
            cin = w;
        }
        specs.push(("head.fc1.weight".into(), vec![self.hidden_dim, cin]));
        specs.push(("head.fc1.bias".into(), vec![self.hidden_dim]));
        specs.push(("head.fc2.weight".into(), vec![self.embed_dim, self.hidden_dim]));
        specs.push(("head.fc2.bias".into(), vec![self.embed_dim]));
        specs
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }
}

/// Ordered parameter tensors of one encoder. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    arch: ArchConfig,
    tensors: Vec<Tensor<T>>,
}

/// Indices into [`EncoderParams::tensors`].
pub(crate) struct Slots;

impl Slots {
    pub fn conv_w(block: usize) -> usize {
        4 * block
    }
    pub fn conv_b(block: usize) -> usize {
        4 * block + 1
    }
    pub fn scale(block: usize) -> usize {
        4 * block + 2
    }
    pub fn shift(block: usize) -> usize {
        4 * block + 3
    }
    pub fn fc1_w(blocks: usize) -> usize {
        4 * blocks
    }
    pub fn fc1_b(blocks: usize) -> usize {
        4 * blocks + 1
    }
    pub fn fc2_w(blocks: usize) -> usize {
        4 * blocks + 2
    }
    pub fn fc2_b(blocks: usize) -> usize {
        4 * blocks + 3
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| Tensor::zeros(name, shape))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    /// He-normal convolution kernels, PyTorch-style uniform linear layers,
    /// unit norm scales, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rng::stream(seed, Domain::Init, &[]);
        let blocks = arch.blocks();
        for b in 0..blocks {
            let w = &mut p.tensors[Slots::conv_w(b)];
            let fan_in = (w.shape[1] * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for v in &mut w.data {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
            for v in &mut p.tensors[Slots::scale(b)].data {
                *v = T::one();
            }
        }
        for (wi, bi) in [
            (Slots::fc1_w(blocks), Slots::fc1_b(blocks)),
            (Slots::fc2_w(blocks), Slots::fc2_b(blocks)),
        ] {
            let bound = 1.0 / (p.tensors[wi].shape[1] as f64).sqrt();
            for idx in [wi, bi] {
                for v in &mut p.tensors[idx].data {
                    *v = T::from_f64_lossy(rng.random_range(-bound..bound));
                }
            }
        }
        Ok(p)
    }

    /// Rebuilds from named tensors; names and shapes must match `arch` exactly.
    pub fn from_tensors(arch: &ArchConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::ArchitectureMismatch {
                found: format!("{} tensors", tensors.len()),
                expected: format!("{} tensors", specs.len()),
            });
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape {
                return Err(Error::ArchitectureMismatch {
                    found: format!("{} {:?}", t.name, t.shape),
                    expected: format!("{name} {shape:?}"),
                });
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(format!("tensor {name} has wrong length")));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    /// Value at a flat index across all tensors, in storage order.
    pub fn flat_get(&self, mut idx: usize) -> T {
        for t in &self.tensors {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut idx: usize, v: T) {
        for t in &mut self.tensors {
            if idx < t.data.len() {
                t.data[idx] = v;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn describe_parses_back() {
        let a = ArchConfig::default();
        assert_eq!(ArchConfig::parse(&a.describe()).unwrap(), a);
        assert!(ArchConfig::parse("in=3 size=32").is_err());
    }

    #[test]
    fn default_layout() {
        let a = ArchConfig::default();
        assert_eq!(a.spatial_sizes(), vec![16, 8, 4, 2]);
        let p = EncoderParams::<f32>::init(&a, 0).unwrap();
        assert_eq!(p.tensors().len(), 20);
        assert!(p.is_finite());
        assert_eq!(p, EncoderParams::<f32>::init(&a, 0).unwrap());
    }

    #[test]
    fn groups_must_divide_widths() {
        let a = ArchConfig {
            groups: 3,
            ..ArchConfig::default()
        };
        assert!(a.validate().is_err());
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(x)).abs() < 1e-8);
        }
    }
}
