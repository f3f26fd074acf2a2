use super::params::EncoderParams;
use super::scalar::Scalar;

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: EncoderParams<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &EncoderParams<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn with_velocity(velocity: EncoderParams<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &EncoderParams<T> {
        &self.velocity
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
    pub fn step(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, lr: f64) {
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::ArchConfig;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.06, 0, 100), 0.06);
        assert!((cosine_lr(0.06, 50, 100) - 0.03).abs() < 1e-12);
        assert!(cosine_lr(0.06, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let arch = ArchConfig::tiny(8);
        let mut p = EncoderParams::<f64>::zeros(&arch).unwrap();
        let mut g = p.zeros_like();
        g.flat_set(0, 1.0);
        let mut opt = Sgd::new(&p, 0.9, 0.0);
        opt.step(&mut p, &g, 0.1);
        assert!((p.flat_get(0) + 0.1).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        assert!((p.flat_get(0) + 0.1 + 0.19).abs() < 1e-12);
    }
}
