//! Adam with bias correction and linear learning-rate warmup.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl AdamConfig {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        Ok(Self {
            cfg,
            step: 0,
            state: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at 1-based step `s`.
    pub fn lr_at(&self, s: u64) -> f64 {
        let w = self.cfg.warmup_steps;
        if w == 0 || s >= w {
            self.cfg.lr
        } else {
            self.cfg.lr * s as f64 / w as f64
        }
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    /// Frozen parameters are left untouched.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Parameter>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr_at(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in params {
            if p.is_frozen() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let data = p.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param_with_grad(name: &str, value: Vec<f64>, grad: Vec<f64>) -> Parameter {
        let n = value.len();
        let mut p = Parameter::new(name, Tensor::new(vec![1, n], value));
        p.tensor.accumulate_grad(&grad);
        p
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Adam::new(AdamConfig::new(0.0, 0)).is_err());
        assert!(Adam::new(AdamConfig::new(-1.0, 0)).is_err());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new(AdamConfig::new(0.1, 0)).unwrap();
        let mut p = param_with_grad("p", vec![1.0, 1.0, 1.0], vec![3.0, -0.02, 1e-3]);
        opt.step([&mut p]);
        let expect = [0.9, 1.1, 0.9];
        for (got, want) in p.tensor.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut opt = Adam::new(AdamConfig::new(0.1, 0)).unwrap();
        let mut p = param_with_grad("p", vec![0.25, -4.0], vec![1.0, 1.0]);
        p.set_frozen(true);
        assert!(p.tensor.grad().is_some_and(|g| g.iter().all(|v| *v != 0.0)));
        let before = p.tensor.clone();
        opt.step([&mut p]);
        assert_eq!(p.tensor.max_abs_diff(&before), 0.0);
        assert_eq!(p.tensor.data(), before.data());
    }

    #[test]
    fn warmup_is_linear() {
        let opt = Adam::new(AdamConfig::new(0.5, 4)).unwrap();
        assert_eq!(opt.lr_at(1), 0.125);
        assert_eq!(opt.lr_at(2), 0.25);
        assert_eq!(opt.lr_at(4), 0.5);
        assert_eq!(opt.lr_at(10), 0.5);
        let mut opt = Adam::new(AdamConfig::new(0.4, 4)).unwrap();
        let mut p = param_with_grad("p", vec![0.0], vec![2.0]);
        opt.step([&mut p]);
        assert!((p.tensor.data()[0] + 0.1).abs() < 1e-6);
    }
}
