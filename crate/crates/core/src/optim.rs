//! First-order optimizers over a list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            batch_size: 16,
            epochs: 10,
        }
    }
}

impl OptimizerConfig {
    /// Settings used for full-scale fine-tuning: AdamW, lr 3e-5, decay 0.01.
    pub fn adamw_reference() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Optimizer with one state slot per parameter tensor, addressed by
/// position in the list passed to [`Optimizer::step`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(params: &[&mut Tensor]) -> f64 {
        params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .fold(0.0, |a, g| a + g * g)
            .sqrt()
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Tensors without a gradient buffer are left untouched.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.first.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, step received {}",
                self.first.len(),
                params.len()
            )));
        }
        let norm = Self::grad_norm(&params);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (bias1, bias2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.take_grad() else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for j in 0..data.len() {
                        let g = scale * grad[j] + c.weight_decay * data[j];
                        m[j] = c.momentum * m[j] + g;
                        data[j] -= c.learning_rate * m[j];
                    }
                }
                OptimizerKind::AdamW => {
                    for j in 0..data.len() {
                        let g = scale * grad[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let update = (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.epsilon);
                        data[j] -= c.learning_rate * (update + c.weight_decay * data[j]);
                    }
                }
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::row_vector(values).unwrap().with_grad();
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let config = OptimizerConfig {
            learning_rate: 0.1,
            clip_norm: None,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(config).unwrap();
        let mut p = param(&[1.0, -2.0], &[0.5, 1.0]);
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        assert!(p.grad().is_none());
        p.accumulate_grad(&[0.5, 1.0]).unwrap();
        opt.step(vec![&mut p]).unwrap();
        // velocity 0.9·0.5 + 0.5 = 0.95
        assert!((p.data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let config = OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::adamw_reference()
        };
        let mut opt = Optimizer::new(config).unwrap();
        let mut p = param(&[1.0, 1.0], &[3.0, -0.2]);
        opt.step(vec![&mut p]).unwrap();
        let lr = 3e-5;
        let expect = |g: f64| 1.0 - lr * (g / (g.abs() + 1e-8) + 0.01);
        assert!((p.data()[0] - expect(3.0)).abs() < 1e-15);
        assert!((p.data()[1] - expect(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_norm() {
        let config = OptimizerConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            clip_norm: Some(1.0),
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(config).unwrap();
        let mut p = param(&[0.0, 0.0], &[3.0, 4.0]);
        opt.step(vec![&mut p]).unwrap();
        assert!((p.data()[0] + 0.6).abs() < 1e-15 && (p.data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
