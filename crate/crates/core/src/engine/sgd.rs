use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with momentum, L2 weight decay and step learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_decay_factor: f64,
    pub step_decay_interval: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            step_decay_factor: 0.1,
            step_decay_interval: 30,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.step_decay_factor > 0.0) || self.step_decay_interval == 0 {
            return Err(Error::Config("step decay factor and interval must be positive".into()));
        }
        Ok(())
    }

    /// `learning_rate · factor^⌊epoch / interval⌋`
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.learning_rate * self.step_decay_factor.powi((epoch / self.step_decay_interval) as i32)
    }
}

/// Optimizer state: one velocity buffer per parameter, by position.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn restore_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// Applies one update to every parameter and clears its gradient.
    pub fn step(&mut self, params: &mut [Tensor], epoch: usize) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(format!("#{i}")));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let lr = self.config.effective_lr(epoch);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (param, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = param.grad().expect("checked above").to_vec();
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
            param.zero_grad();
        }
        Ok(())
    }
}

/// One-shot functional form of [`Sgd::step`] with caller-owned velocity.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut Vec<Vec<f64>>,
    config: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    let mut opt = Sgd::new(config.clone())?;
    opt.velocity = std::mem::take(velocity);
    opt.step(params, epoch)?;
    *velocity = opt.velocity;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: 0.0,
            step_decay_factor: 0.1,
            step_decay_interval: 30,
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![Tensor::zeros(&[1])];
        p[0].set_grad(vec![1.0]).unwrap();
        let mut opt = Sgd::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut p, 0).unwrap();
        assert!((p[0].item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn step_decay_every_thirty_epochs() {
        let c = SgdConfig {
            learning_rate: 0.001,
            ..SgdConfig::default()
        };
        assert!((c.effective_lr(29) - 0.001).abs() < 1e-18);
        assert!((c.effective_lr(30) - 0.0001).abs() < 1e-18);
        assert!((c.effective_lr(60) - 0.00001).abs() < 1e-18);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut opt = Sgd::new(cfg(0.1, 0.9)).unwrap();
        p[0].set_grad(vec![1.0]).unwrap();
        opt.step(&mut p, 0).unwrap();
        assert!((p[0].item() + 0.1).abs() < 1e-12);
        p[0].set_grad(vec![1.0]).unwrap();
        opt.step(&mut p, 0).unwrap();
        assert!((p[0].item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![Tensor::full(&[1], 2.0)];
        p[0].set_grad(vec![0.0]).unwrap();
        let mut c = cfg(0.5, 0.0);
        c.weight_decay = 0.1;
        let mut opt = Sgd::new(c).unwrap();
        opt.step(&mut p, 0).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut opt = Sgd::new(cfg(0.1, 0.0)).unwrap();
        assert!(matches!(opt.step(&mut p, 0), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(Sgd::new(cfg(0.0, 0.0)).is_err());
        assert!(Sgd::new(cfg(0.1, 1.0)).is_err());
    }

    #[test]
    fn functional_form_keeps_velocity() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut v = Vec::new();
        let c = cfg(0.1, 0.9);
        for _ in 0..2 {
            p[0].set_grad(vec![1.0]).unwrap();
            sgd_step(&mut p, &mut v, &c, 0).unwrap();
        }
        assert!((p[0].item() + 0.29).abs() < 1e-12);
    }
}
