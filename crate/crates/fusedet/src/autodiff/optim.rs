//! Adaptive-moment optimizer with decoupled weight decay and a triangular
//! cyclic learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Peak of the triangular cycle. Equal to `base_lr` for a constant rate.
    pub max_lr: f64,
    /// Steps per full cycle; 0 disables cycling.
    pub cycle_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            max_lr: 1e-4,
            cycle_steps: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Effective learning rate for a 0-indexed step: linear ramp base -> max
    /// over the first half of the cycle, max -> base over the second half.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cycle_steps == 0 || self.max_lr == self.base_lr {
            return self.base_lr;
        }
        let phase = (step % self.cycle_steps) as f64;
        let half = self.cycle_steps as f64 / 2.0;
        let frac = if phase <= half {
            phase / half
        } else {
            (self.cycle_steps as f64 - phase) / half
        };
        self.base_lr + (self.max_lr - self.base_lr) * frac
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            step: 0,
            moments: IndexMap::new(),
            config,
        }
    }

    /// One update over every parameter in the store, consuming `grad` (grads
    /// are zeroed afterwards). Returns the learning rate used. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        for (name, p) in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.config.beta1.powi(t);
        let c2 = 1.0 - self.config.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.data.len()], vec![0.0; p.data.len()]));
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.config.beta1 * m[i] + (1.0 - self.config.beta1) * g;
                v[i] = self.config.beta2 * v[i] + (1.0 - self.config.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let w = p.data[i];
                p.data[i] = w - lr * (m_hat / (v_hat.sqrt() + self.config.eps))
                    - lr * self.config.weight_decay * w;
            }
        }
        store.zero_grads();
        Ok(lr)
    }

    /// Moment accumulators for checkpointing, insertion-ordered.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Vec<f64>, Vec<f64>))> {
        self.moments.iter()
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(name.to_string(), (m, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", vec![value], vec![]);
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut store = one_param(1.5);
        let mut opt = Optimizer::new(OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 1.5);
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let lr = 1e-3;
        let wd = 0.1;
        let mut store = one_param(2.0);
        let mut opt = Optimizer::new(OptimConfig {
            base_lr: lr,
            max_lr: lr,
            weight_decay: wd,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        let expected = 2.0 * (1.0 - lr * wd);
        assert!((store.get("w").unwrap().data[0] - expected).abs() < 1e-15);
        opt.step(&mut store).unwrap();
        let expected2 = expected * (1.0 - lr * wd);
        assert!((store.get("w").unwrap().data[0] - expected2).abs() < 1e-15);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2, grad = 2 (w - 3)
        let mut store = one_param(0.0);
        let mut opt = Optimizer::new(OptimConfig {
            base_lr: 0.05,
            max_lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..200 {
            let w = store.get("w").unwrap().data[0];
            store.get_mut("w").unwrap().grad[0] = 2.0 * (w - 3.0);
            opt.step(&mut store).unwrap();
        }
        let w = store.get("w").unwrap().data[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut store = one_param(1.0);
        store.get_mut("w").unwrap().grad[0] = f64::NAN;
        let mut opt = Optimizer::new(OptimConfig::default());
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        // parameter untouched
        assert_eq!(store.get("w").unwrap().data[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn cyclic_schedule_peaks_at_midpoint() {
        let cfg = OptimConfig {
            base_lr: 1e-4,
            max_lr: 1e-3,
            cycle_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(50), 1e-3);
        assert_eq!(cfg.lr_at(100), 1e-4);
        assert!((cfg.lr_at(25) - 5.5e-4).abs() < 1e-12);
        assert!((cfg.lr_at(75) - 5.5e-4).abs() < 1e-12);
    }
}
