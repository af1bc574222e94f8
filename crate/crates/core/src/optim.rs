//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `base * (1 + cos(pi * step / total)) / 2`, clamped at the end of the
/// schedule.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub trait Optimizer<T: Scalar> {
    /// One update. `grads[i]` belongs to `params[i]`; `None` leaves the
    /// parameter untouched.
    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: f64);
}

fn ensure_state<T: Scalar>(state: &mut Vec<Tensor<T>>, params: &[&mut Tensor<T>]) {
    if state.len() != params.len() {
        *state = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// Step count and moment estimates, for checkpointing.
    pub fn moments(&self) -> (i32, &[Tensor<T>], &[Tensor<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: i32, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        ensure_state(&mut self.m, &params);
        ensure_state(&mut self.v, &params);
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (step, c2s, e) = (T::lit(lr / c1), T::lit(c2.sqrt()), T::lit(eps));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *w -= step * m[j] / (v[j].sqrt() / c2s + e);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
        }
    }
}

/// SGD with (optionally Nesterov) momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    buf: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buf: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        ensure_state(&mut self.buf, &params);
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let lr = T::lit(lr);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let buf = self.buf[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = gj + wd * *w;
                buf[j] = mu * buf[j] + d;
                let upd = if self.config.nesterov { d + mu * buf[j] } else { buf[j] };
                *w -= lr * upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-12);
        assert!(cosine_lr(0.1, 20, 10).abs() < 1e-12);
    }

    fn minimise(opt: &mut dyn Optimizer<f64>, lr: f64) -> f64 {
        // f(w) = sum (w - 3)^2
        let mut w = Tensor::from_vec(&[2], vec![0.0, 10.0]).unwrap();
        for _ in 0..500 {
            let g = w.map(|v| 2.0 * (v - 3.0));
            opt.step(vec![&mut w], &[Some(g)], lr);
        }
        w.data().iter().map(|v| (v - 3.0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn adam_converges_on_quadratic() {
        assert!(minimise(&mut Adam::new(AdamConfig::default()), 0.1) < 1e-3);
    }

    #[test]
    fn nesterov_converges_on_quadratic() {
        assert!(minimise(&mut Sgd::new(SgdConfig::default()), 0.01) < 1e-6);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut w = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut w], &[Some(Tensor::from_vec(&[1], vec![5.0]).unwrap())], 0.01);
        assert!((w.data()[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut w = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        Sgd::new(SgdConfig::default()).step(vec![&mut w], &[None], 0.1);
        assert_eq!(w.data(), &[1.0]);
    }
}
