//! Stochastic gradient descent with optional classical momentum.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD state: one velocity buffer per parameter, lazily sized on first step.
pub struct Sgd<S: Scalar> {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("sgd lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("sgd momentum must be in [0,1), got {momentum}")));
        }
        if !(0.0..1.0).contains(&weight_decay) {
            return Err(Error::Config(format!("sgd weight_decay must be in [0,1), got {weight_decay}")));
        }
        Ok(Sgd { lr, momentum, weight_decay, velocity: Vec::new() })
    }

    /// `v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v` for
    /// every parameter that carries a gradient. Parameters without a gradient
    /// are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "sgd state tracks {} parameters, step got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let m = S::fromf(self.momentum);
        let lr = S::fromf(self.lr);
        let wd = S::fromf(self.weight_decay);
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                p.grad = Some(grad);
                return Err(Error::Numeric(format!("non-finite gradient in parameter {idx}")));
            }
            let v = &mut self.velocity[idx];
            if v.len() != grad.len() {
                return Err(Error::Config(format!(
                    "sgd velocity {idx} has {} elements, gradient has {}",
                    v.len(),
                    grad.len()
                )));
            }
            let data = p.data_mut();
            for i in 0..grad.len() {
                v[i] = m * v[i] + grad[i] + wd * data[i];
                data[i] = data[i] - lr * v[i];
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(v);
        t.requires_grad = true;
        t
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0);
        p.grad = Some(vec![1.0]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = param(1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        p.grad = Some(vec![1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
        p.grad = Some(vec![1.0]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        // Zero gradient, wd 0.5: v = 0.5*theta, theta <- theta - lr*v.
        let mut p = param(2.0);
        p.grad = Some(vec![0.0]);
        let mut opt = Sgd::new(0.1, 0.0, 0.5).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_keeps_param() {
        let mut p = param(2.5);
        p.grad = Some(vec![0.0]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn nan_grad_aborts() {
        let mut p = param(1.0);
        p.grad = Some(vec![f64::NAN]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        assert!(opt.step(&mut [&mut p]).is_err());
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(Sgd::<f64>::new(0.0, 0.0, 0.0).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::<f64>::new(0.1, 0.0, 1.0).is_err());
        assert!(Sgd::<f64>::new(0.1, 0.99, 0.01).is_ok());
    }
}
