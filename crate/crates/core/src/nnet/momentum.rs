use super::params::EncoderParams;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Online encoder and its exponential-moving-average twin.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair<T = f32> {
    pub online: EncoderParams<T>,
    pub target: EncoderParams<T>,
    pub m: f64,
}

impl<T: Scalar> MomentumPair<T> {
    /// Target starts as an exact copy of the online encoder.
    pub fn new(online: EncoderParams<T>, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
        }
        Ok(Self {
            target: online.clone(),
            online,
            m,
        })
    }

    /// `target <- m * target + (1 - m) * online`, elementwise.
    pub fn update(&mut self) {
        momentum_update(&mut self.target, &self.online, self.m);
    }
}

/// EMA step. Results are clamped to the interval spanned by the old target
/// and online values so rounding never leaves it.
pub fn momentum_update<T: Scalar>(target: &mut EncoderParams<T>, online: &EncoderParams<T>, m: f64) {
    let a = T::from_f64_lossy(m);
    let b = T::from_f64_lossy(1.0 - m);
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (tv, &ov) in t.data.iter_mut().zip(&o.data) {
            let (lo, hi) = if *tv <= ov { (*tv, ov) } else { (ov, *tv) };
            *tv = (a * *tv + b * ov).max(lo).min(hi);
        }
    }
}
