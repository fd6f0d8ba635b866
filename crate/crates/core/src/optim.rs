//! RAdam with coupled L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, Param};

/// Optimizer hyper-parameters. Defaults follow the detector settings:
/// β = (0.9, 0.999), weight decay 5e-4, lr 5e-4 decayed ×0.1 every 10 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decay_every: 10,
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    /// Generator defaults: same betas, learning rate 2e-3.
    pub fn generator() -> Self {
        OptimConfig {
            lr: 2e-3,
            ..OptimConfig::default()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Moment estimates and step counter; saved in checkpoints so training can
/// resume on the same trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub config: OptimConfig,
    pub state: RAdamState,
}

impl RAdam {
    pub fn new(config: OptimConfig, params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        RAdam {
            config,
            state: RAdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn with_state(config: OptimConfig, state: RAdamState) -> Self {
        RAdam { config, state }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [Param], grads: &Gradients, lr: f64) {
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let beta2_t = c.beta2.powf(t);
        let bias2 = 1.0 - beta2_t;
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * beta2_t / bias2;
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt(),
            )
        } else {
            None
        };
        for (pi, p) in params.iter_mut().enumerate() {
            let m = &mut self.state.m[pi];
            let v = &mut self.state.v[pi];
            for (j, w) in p.value.iter_mut().enumerate() {
                let g = grads[pi][j] + c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let update = match rect {
                    Some(r) => m_hat * r * bias2.sqrt() / (v[j].sqrt() + c.eps),
                    None => m_hat,
                };
                *w -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            shape: vec![values.len()],
            value: values,
        }]
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut params = one_param(vec![0.3, -1.7, 2.5e-9]);
        let before = params.clone();
        let mut opt = RAdam::new(OptimConfig::default(), &params);
        for _ in 0..10 {
            opt.step(&mut params, &vec![vec![1.0, -2.0, 3.0]], 0.0);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn early_steps_are_plain_momentum_descent() {
        // first step: m_hat = g, rectification inactive
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut params = one_param(vec![1.0]);
        let mut opt = RAdam::new(cfg, &params);
        opt.step(&mut params, &vec![vec![0.5]], 0.1);
        assert!((params[0].value[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            lr: 0.05,
            ..OptimConfig::default()
        };
        let mut params = one_param(vec![3.0, -2.0]);
        let mut opt = RAdam::new(cfg.clone(), &params);
        for _ in 0..2000 {
            let g = params[0].value.iter().map(|w| 2.0 * w).collect();
            opt.step(&mut params, &vec![g], cfg.lr);
        }
        assert!(params[0].value.iter().all(|w| w.abs() < 1e-2), "{:?}", params[0].value);
    }

    #[test]
    fn step_schedule_decays_every_ten_epochs() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(9), 5e-4);
        assert!((cfg.lr_at(10) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(25) - 5e-6).abs() < 1e-19);
    }
}
