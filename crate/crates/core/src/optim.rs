//! Adam with bias correction and a cosine learning-rate decay.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

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
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter group, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter that holds a gradient, then
    /// clears those gradients. Parameters without a gradient are skipped.
    pub fn step<'p, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'p str, &'p mut Tensor<T>)>,
    {
        let step = self.step_count + 1;
        let params: Vec<_> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {name} (element {bad})"),
                        context: format!("optimizer step {step}"),
                    });
                }
            }
        }

        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(eps);

        for (name, p) in params {
            let Some(g) = p.take_grad() else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            if m.len() != g.len() {
                return Err(Error::dim("adam_step", &[m.len()], &[g.len()]));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
        self.step_count = step;
        Ok(())
    }
}

/// Cosine decay from `initial_lr` at step 0 to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial_lr: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl CosineSchedule {
    pub fn new(initial_lr: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("cosine schedule needs total_steps >= 1"));
        }
        Ok(Self {
            initial_lr,
            total_steps,
            min_lr: 0.0,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step == 0 {
            return self.initial_lr;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let progress = step as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.initial_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len()], v).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = param(&[1.0, -2.0]);
        p.accumulate_grad(&[0.5, 0.5]).unwrap();
        adam.step([("w", &mut p)], 0.1).unwrap();
        let before = p.data().to_vec();
        let m_before = adam.moments("w").unwrap().0.to_vec();
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        adam.step([("w", &mut p)], 0.0).unwrap();
        assert_eq!(p.data(), before.as_slice());
        let m_after = adam.moments("w").unwrap().0;
        assert!(m_after.iter().zip(&m_before).all(|(a, b)| a.abs() < b.abs()));
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = param(&[3.0]);
        p.accumulate_grad(&[0.0]).unwrap();
        adam.step([("w", &mut p)], 1.0).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = param(&[0.0, 0.0]);
        let lr = 0.01;
        let mut last = vec![0.0; 2];
        for _ in 0..2000 {
            let before = p.data().to_vec();
            p.accumulate_grad(&[2.5, -0.3]).unwrap();
            adam.step([("w", &mut p)], lr).unwrap();
            last = p.data().iter().zip(&before).map(|(a, b)| a - b).collect();
        }
        assert!((last[0] + lr).abs() < 1e-6, "{last:?}");
        assert!((last[1] - lr).abs() < 1e-6, "{last:?}");
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut adam = AdamState::<f32>::new(AdamConfig::default());
        let mut p = Tensor::<f32>::ones(vec![2]).with_requires_grad(true);
        for expected in 1..=3 {
            p.accumulate_grad(&[1.0, 1.0]).unwrap();
            adam.step([("w", &mut p)], 1e-3).unwrap();
            assert_eq!(adam.step_count(), expected);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_step() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = param(&[1.0]);
        p.accumulate_grad(&[f64::NAN]).unwrap();
        let err = adam.step([("blocks.3.q.base", &mut p)], 1e-3).unwrap_err().to_string();
        assert!(err.contains("blocks.3.q.base") && err.contains("step 1"), "{err}");
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = CosineSchedule::new(1e-3, 640).unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(640), 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..=640 {
            let lr = s.lr(step);
            assert!(lr <= prev);
            prev = lr;
        }
        let with_floor = CosineSchedule {
            min_lr: 1e-5,
            ..CosineSchedule::new(9.65e-5, 7).unwrap()
        };
        assert_eq!(with_floor.lr(0), 9.65e-5);
        assert_eq!(with_floor.lr(7), 1e-5);
        assert!(CosineSchedule::new(1.0, 0).is_err());
    }
}
