//! Adam and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the grads currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = p.grad.data().to_vec();
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales all grads so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..300 {
            store.zero_grad();
            let tape = Tape::new();
            let w = tape.param(&store, id);
            let loss = tape.sum(tape.mul(w, w).unwrap()).unwrap();
            tape.backward_into(loss, &mut store).unwrap();
            opt.step(&mut store);
        }
        assert!(store.value(id).norm() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::vector(vec![0.123456789, -7.5]))
            .unwrap();
        let before = store.value(id).clone();
        store.params_mut()[0].grad = Tensor::vector(vec![1.5, -0.25]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        store.params_mut()[0].grad = Tensor::vector(vec![3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
