//! Adaptive-moment optimizer with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer state bound to one parameter layout. Gradients are read, not
/// cleared.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            p.ids()
                .map(|id| Tensor::zeros(p.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradient buffers and returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> f64 {
        let norm = params.grad_sq_norm().as_f64().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::of(self.config.lr * bc2.sqrt() / bc1);
        let (b1, b2, eps, clip) = (T::of(b1), T::of(b2), T::of(self.config.eps), T::of(clip));
        let one = T::one();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = params.grad(id).clone();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = params.value_mut(id);
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * clip;
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        let w = p.add("w", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..500 {
            p.zero_grad();
            let mut tape = Tape::new();
            let x = tape.param(&p, w);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss, &mut [&mut p]).unwrap();
            opt.step(&mut p);
        }
        assert!(p.value(w).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let before = p.fingerprint();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p);
        assert_eq!(before, p.fingerprint());
    }
}
