// SPDX-License-Identifier: Apache-2.0

//! AdamW with decoupled weight decay and the one-cycle schedule.

use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Learning rate and first-moment decay for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepHyper {
    pub lr: f64,
    pub beta1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub total_steps: usize,
    pub lr_max: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub warmup_frac: f64,
    pub beta1_max: f64,
    pub beta1_min: f64,
}

fn cos_anneal(start: f64, end: f64, t: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (PI * t).cos())
}

impl OneCycle {
    /// Cosine ramp from `lr_max / div_factor` to `lr_max` over the warmup,
    /// then down to `lr_max / final_div`; beta1 moves the opposite way.
    pub fn at(&self, step: usize) -> StepHyper {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_frac * total).max(1.0);
        let s = step as f64;
        let lo = self.lr_max / self.div_factor;
        if s < warm {
            let t = s / warm;
            StepHyper {
                lr: cos_anneal(lo, self.lr_max, t),
                beta1: cos_anneal(self.beta1_max, self.beta1_min, t),
            }
        } else {
            let t = ((s - warm) / (total - warm).max(1.0)).min(1.0);
            StepHyper {
                lr: cos_anneal(self.lr_max, self.lr_max / self.final_div, t),
                beta1: cos_anneal(self.beta1_min, self.beta1_max, t),
            }
        }
    }
}

/// AdamW over every trainable parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Moments, parallel to the store.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Running product of beta1 over the steps taken, for bias correction
    /// under a varying beta1.
    pub beta1_prod: f64,
    pub steps: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(&p.value.shape)).collect();
        Self {
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            beta1_prod: 1.0,
            steps: 0,
        }
    }

    /// One update from the gradients held in the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, h: StepHyper) {
        self.steps += 1;
        self.beta1_prod *= h.beta1;
        let bc1 = 1.0 - self.beta1_prod;
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(h.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step = T::lit(h.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let decay = T::lit(1.0 - h.lr * self.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * g;
                v.data[i] = b2 * v.data[i] + (one - b2) * g * g;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.value.data[i] = p.value.data[i] * decay - step * m.data[i] / denom;
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-12));
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle() -> OneCycle {
        OneCycle {
            total_steps: 100,
            lr_max: 0.01,
            div_factor: 10.0,
            final_div: 100.0,
            warmup_frac: 0.4,
            beta1_max: 0.95,
            beta1_min: 0.85,
        }
    }

    #[test]
    fn one_cycle_endpoints() {
        let c = cycle();
        let start = c.at(0);
        assert!((start.lr - 0.001).abs() < 1e-15);
        assert!((start.beta1 - 0.95).abs() < 1e-15);
        let peak = c.at(40);
        assert!((peak.lr - 0.01).abs() < 1e-15);
        assert!((peak.beta1 - 0.85).abs() < 1e-15);
        let end = c.at(100);
        assert!((end.lr - 1e-4).abs() < 1e-15);
        assert!((end.beta1 - 0.95).abs() < 1e-15);
        for s in 0..40 {
            assert!(c.at(s + 1).lr >= c.at(s).lr);
        }
        for s in 40..100 {
            assert!(c.at(s + 1).lr <= c.at(s).lr);
        }
    }

    /// Closed-form first step: `p - lr * sign(g)` (up to eps) after decay.
    #[test]
    fn first_step_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]), true);
        let frozen = store.add("bn.running_mean", Tensor::from_vec(&[1], vec![7.0]), false);
        store.get_mut(id).grad = Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]);
        store.get_mut(frozen).grad = Tensor::from_vec(&[1], vec![1.0]);
        let mut opt = AdamW::new(&store, 0.999, 0.01);
        let h = StepHyper { lr: 0.1, beta1: 0.9 };
        opt.step(&mut store, h);
        let w = &store.get(id).value.data;
        let d = 1.0 - 0.1 * 0.01;
        assert!((w[0] - (1.0 * d - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-2.0 * d + 0.1)).abs() < 1e-6);
        assert!((w[2] - 0.5 * d).abs() < 1e-12);
        assert_eq!(store.get(frozen).value.data, vec![7.0]);
    }

    /// Compare against a scalar reference implementation with constant betas.
    #[test]
    fn matches_reference_over_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![0.7]), true);
        let mut opt = AdamW::new(&store, 0.99, 0.05);
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64 * 0.37).sin();
            store.get_mut(id).grad.data[0] = g;
            let lr = 0.01 * t as f64;
            opt.step(&mut store, StepHyper { lr, beta1: 0.9 });
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            p = p * (1.0 - lr * 0.05) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).value.data[0] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2]), true);
        store.get_mut(id).grad = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
        assert_eq!(store.get(id).grad.data, vec![3.0, 4.0]);
        clip_grad_norm(&mut store, 1.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-9);
    }
}
