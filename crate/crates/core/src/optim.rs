//! First-order optimizers and step-size schedules.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.step_with_lr(params, grad, self.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] = params[i] - step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 99, 100).abs() < 1e-12);
        assert!((cosine_lr(0.1, 50, 101) - 0.05).abs() < 1e-12);
    }
}
