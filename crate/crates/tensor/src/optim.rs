//! Adam with decoupled weight decay, cosine learning-rate annealing and
//! stochastic weight averaging.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter Adam moments plus the step counter and the current
/// learning rate (which the schedule overwrites each epoch).
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar> {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        Self {
            lr: config.lr,
            config,
            step: 0,
            first: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter that requires a gradient.
    /// Frozen parameters are left untouched.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(TensorError::Optimizer(format!(
                "state tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(TensorError::Optimizer(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.first[i].len() {
                return Err(TensorError::Optimizer(format!("parameter {i} changed size")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(self.lr);
        let decay = T::from_f64_lossy(1.0 - self.lr * c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = T::from_f64_lossy(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                if c.weight_decay != 0.0 {
                    *w *= decay;
                }
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` to `final_fraction * base_lr` over
/// `total_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub final_fraction: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            base_lr,
            final_fraction: 0.01,
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let floor = self.final_fraction * self.base_lr;
        if self.total_epochs <= 1 {
            return self.base_lr;
        }
        let progress = epoch.min(self.total_epochs - 1) as f64 / (self.total_epochs - 1) as f64;
        floor + (self.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Sets the optimizer's learning rate for `epoch` and returns it.
    pub fn step<T: Scalar>(&self, state: &mut OptimState<T>, epoch: usize) -> f64 {
        state.lr = self.lr_at(epoch);
        state.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaOutcome {
    Averaged(usize),
    /// No snapshot was taken; the last weights were kept.
    NoSnapshots,
}

/// Running equal-weight average of parameter snapshots, accumulated in f64
/// so the result does not depend on snapshot order.
#[derive(Debug, Clone, Default)]
pub struct SwaAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl SwaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update<T: Scalar>(&mut self, params: &[&Tensor<T>]) {
        if self.sums.is_empty() {
            self.sums = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (sum, p) in self.sums.iter_mut().zip(params) {
            for (s, &v) in sum.iter_mut().zip(p.data()) {
                *s += v.to_f64_lossy();
            }
        }
        self.count += 1;
    }

    pub fn average<T: Scalar>(&self) -> Option<Vec<Vec<T>>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(
            self.sums
                .iter()
                .map(|s| s.iter().map(|&v| T::from_f64_lossy(v / n)).collect())
                .collect(),
        )
    }

    /// Replaces the parameters with the running average.
    pub fn finalize<T: Scalar>(&self, params: &mut [&mut Tensor<T>]) -> SwaOutcome {
        match self.average::<T>() {
            None => SwaOutcome::NoSnapshots,
            Some(avg) => {
                for (p, a) in params.iter_mut().zip(avg) {
                    p.data_mut().copy_from_slice(&a);
                }
                SwaOutcome::Averaged(self.count)
            }
        }
    }
}
