//! AdamW with decoupled weight decay and a linear learning-rate schedule.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` is `None` for parameters that are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<Vec<S>>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one, eps) = (S::one(), S::lit(c.eps));
        let step = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let decay = S::lit(1.0 - lr * c.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                *w = *w * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Learning rate at optimizer step `step` (0-based) decaying linearly from
/// `base` to zero over `total` steps.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_endpoints() {
        assert_eq!(linear_decay(1e-3, 0, 10), 1e-3);
        assert!((linear_decay(1e-3, 5, 10) - 5e-4).abs() < 1e-12);
        assert_eq!(linear_decay(1e-3, 10, 10), 0.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &[3]);
        opt.step(&mut [&mut p], &[Some(vec![0.3, 0.1, -0.2])], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After bias correction the first Adam step is lr·g/(|g|+eps).
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut opt = AdamW::new(cfg, &[2]);
        opt.step(&mut [&mut p], &[Some(vec![2.0, -0.5])], 0.1);
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut p = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        opt.step(&mut [&mut p], &[Some(vec![0.0])], 0.5);
        assert!((p.data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-12);
    }
}
