//! Adam over the trainable parameters of a store.

use serde::{Deserialize, Serialize};

use crate::engine::Real;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// First and second moment estimates, one buffer per parameter (empty for
/// parameters that have never received a gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let n = store.params().len();
        Adam {
            cfg,
            t: 0,
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// entry, and frozen ones, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
        let (ob1, ob2) = (T::of_f64(1.0 - beta1), T::of_f64(1.0 - beta2));
        let step = T::of_f64(lr / bc1);
        let inv_bc2 = T::of_f64(1.0 / bc2);
        let eps = T::of_f64(eps);
        for (id, g) in grads {
            let i = store.index_of(*id);
            let p = &mut store.get_mut(*id).tensor;
            if !p.requires_grad() {
                continue;
            }
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient for parameter {i} has the wrong length")));
            }
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); g.len()];
                self.v[i] = vec![T::zero(); g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let vhat = *vi * inv_bc2;
                *w = *w - step * *mi / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2`. Steps outside
/// `[0, total]` are clamped with a warning.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = if step > total {
        log::warn!("schedule step {step} beyond total {total}; clamped");
        total
    } else {
        step
    };
    if s == total {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;
    use crate::params::Init;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 3e-4, 1e-6), 3e-4);
        assert_eq!(cosine_lr(1000, 1000, 3e-4, 1e-6), 1e-6);
        assert!((cosine_lr(500, 1000, 3e-4, 1e-6) - 1.505e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(1500, 1000, 3e-4, 1e-6), 1e-6);
    }

    #[test]
    fn schedule_never_increases() {
        let mut prev = f64::INFINITY;
        for s in 0..=777 {
            let lr = cosine_lr(s, 777, 3e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_steps_match_closed_form() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.register("w", &[1], Init::Zeros);
        store.get_mut(id).tensor.data_mut()[0] = 0.5;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = [0.3, -0.2, 0.7];
        let lr = 1e-2;
        // direct recomputation of the bias-corrected update
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.5f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(&mut store, &[(id, vec![g])], lr).unwrap();
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert!((store.get(id).tensor.data()[0] - w).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::<f32>::new(3);
        let id = store.register("w", &[5], Init::KaimingUniform { fan_in: 5 });
        let before: Tensor<f32> = store.get(id).tensor.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[(id, vec![1.0, -2.0, 0.5, 0.0, 3.0])], 0.0).unwrap();
        assert_eq!(store.get(id).tensor.data(), before.data());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f32>::new(3);
        let id = store.register("frozen.w", &[2], Init::Ones);
        store.set_trainable("frozen.", false);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[(id, vec![1.0, 1.0])], 0.1).unwrap();
        assert_eq!(store.get(id).tensor.data(), &[1.0, 1.0]);
    }
}
