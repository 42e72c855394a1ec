//! Adaptive-moment gradient descent.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a flat parameter vector. `begin_step` must be called once per
/// optimizer step before the per-parameter updates; parameters that are not visited in a
/// step keep their moments (lazy variant).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    bias1: T,
    bias2: T,
}

impl<T: Float> Adam<T> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            bias1: T::one(),
            bias2: T::one(),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
        let b1 = T::from(self.cfg.beta1).unwrap();
        let b2 = T::from(self.cfg.beta2).unwrap();
        self.bias1 = T::one() - b1.powi(self.t);
        self.bias2 = T::one() - b2.powi(self.t);
    }

    #[inline]
    pub fn update(&mut self, i: usize, param: &mut T, grad: T, lr: T) {
        let b1 = T::from(self.cfg.beta1).unwrap();
        let b2 = T::from(self.cfg.beta2).unwrap();
        let eps = T::from(self.cfg.eps).unwrap();
        let m = b1 * self.m[i] + (T::one() - b1) * grad;
        let v = b2 * self.v[i] + (T::one() - b2) * grad * grad;
        self.m[i] = m;
        self.v[i] = v;
        let mhat = m / self.bias1;
        let vhat = v / self.bias2;
        *param = *param - lr * mhat / (vhat.sqrt() + eps);
    }

    /// Dense step over all parameters.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.begin_step();
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g, lr);
        }
    }
}
