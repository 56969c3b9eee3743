use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            config,
        }
    }

    /// One bias-corrected Adam update of `param` from `param.grad`.
    pub fn step(&mut self, param: &mut Tensor) -> Result<()> {
        let grad = param
            .grad
            .take()
            .ok_or_else(|| Error::invalid("adam_step", "parameter has no gradient"))?;
        if grad.len() != self.first_moment.len() {
            param.grad = Some(grad);
            return Err(Error::Shape {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: vec![self.first_moment.len()],
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let values = param.values_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            self.second_moment[i] = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        param.grad = Some(grad);
        Ok(())
    }
}

/// Adam over every tensor of a [`ParamStore`], states aligned by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            states: store.iter().map(|(_, t)| AdamState::new(t.len(), config)).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} states for {} parameters", self.states.len(), store.len()),
            ));
        }
        for (state, tensor) in self.states.iter_mut().zip(store.tensors_mut()) {
            state.step(tensor)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![v]).with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::from_vec(vec![0.3, -1.2, 4.0]).with_grad();
        p.grad = Some(vec![0.0; 3]);
        let mut state = AdamState::new(3, AdamConfig::default());
        for _ in 0..5 {
            state.step(&mut p).unwrap();
        }
        assert_eq!(p.values(), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = v_hat = 1 after bias correction, so delta = -lr / (1 + eps).
        let mut p = scalar_param(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(1, cfg);
        state.step(&mut p).unwrap();
        assert!((p.values()[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn constant_gradient_trajectory_matches_closed_form() {
        // With a constant gradient both bias-corrected moments are exact, so
        // every step equals -lr * g / (|g| + eps) and |delta| never grows.
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let g = 2.5;
        let mut p = scalar_param(1.0, g);
        let mut state = AdamState::new(1, cfg);
        let expected = -cfg.lr * g / (g.abs() + cfg.eps);
        let mut prev = f64::INFINITY;
        for _ in 0..4 {
            let before = p.values()[0];
            state.step(&mut p).unwrap();
            let delta = p.values()[0] - before;
            assert!((delta - expected).abs() < 1e-12);
            assert!(delta.abs() <= prev + 1e-15);
            prev = delta.abs();
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::from_vec(vec![1.0]).with_grad();
        let mut state = AdamState::new(1, AdamConfig::default());
        assert!(state.step(&mut p).is_err());
        assert_eq!(state.step_count, 0);
    }
}
