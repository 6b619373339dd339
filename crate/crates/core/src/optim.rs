//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::ParamSet;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
    #[error("gradient count {got} does not match parameter count {expected}")]
    GradientCount { got: usize, expected: usize },
}

/// Adam hyperparameters. Defaults follow the usual convention:
/// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates and the shared step count.
pub struct AdamState<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamState { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// One bias-corrected Adam update over all parameters. Gradients must
    /// be aligned with the parameter set order.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::GradientCount {
                got: grads.len(),
                expected: params.len(),
            });
        }
        for (idx, grad) in grads.iter().enumerate() {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: params.get(idx).name.clone(),
                });
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.epsilon);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bias2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.cfg.learning_rate);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = params.get_mut(idx).value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.push("w", Tensor::scalar(value));
        set
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = single_param(1.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
        adam.step(&mut params, &[vec![0.0]]).unwrap();
        assert_eq!(params.get(0).value.item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(grad) up to
        // the epsilon term: 1.0 - 0.1 * 1/(1 + 1e-8) ~= 0.9.
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
        adam.step(&mut params, &[vec![1.0]]).unwrap();
        assert!((params.get(0).value.item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_decreases_parameter_monotonically() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
        let mut prev = params.get(0).value.item();
        for _ in 0..2 {
            adam.step(&mut params, &[vec![1.0]]).unwrap();
            let cur = params.get(0).value.item();
            assert!(cur < prev, "expected decrease, got {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
        let err = adam.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }

    #[test]
    fn clip_reduces_large_gradients_only() {
        let mut grads = vec![vec![3.0f64, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        let mut small = vec![vec![0.3f64, 0.4]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.3, 0.4]);
    }
}
