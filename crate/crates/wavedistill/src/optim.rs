//! SGD with classical momentum: `v = momentum * v + g`, `p -= lr * v`,
//! after rescaling the joint gradient to a global-norm ceiling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state. Velocity buffers are allocated on the first step and
/// stay aligned with the parameter order, which must not change between
/// steps.
#[derive(Debug, Clone)]
pub struct SgdState {
    lr: f64,
    momentum: f64,
    clip_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    /// `lr` may be zero (a zero step leaves parameters untouched), never
    /// negative; `momentum` lives in `[0, 1)`; `clip_norm` is the global
    /// gradient-norm ceiling, positive, with `inf` meaning no clipping.
    pub fn new(lr: f64, momentum: f64, clip_norm: f64) -> Result<Self> {
        validate_lr(lr)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum {momentum} outside [0, 1)")));
        }
        if clip_norm.is_nan() || clip_norm <= 0.0 {
            return Err(Error::config(format!("clip norm {clip_norm} must be positive")));
        }
        Ok(SgdState { lr, momentum, clip_norm, velocity: Vec::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        validate_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    /// Velocity buffers in parameter order; empty before the first step.
    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Replaces the velocity buffers (resume path). Sizes are re-validated
    /// against the parameters on the next step.
    pub fn restore_velocities(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// One update over `params`, consuming their accumulated gradients.
    /// When the joint gradient norm exceeds `clip_norm` the whole gradient
    /// is rescaled onto the ceiling, preserving its direction. Every
    /// parameter must carry a gradient; any non-finite gradient or updated
    /// value aborts with an error before parameters are corrupted.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer saw {} parameters, expected {}",
                params.len(),
                self.velocity.len()
            )));
        }
        // Validate everything first so a failed step never half-applies.
        let mut sq_norm = 0.0;
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                Error::Train(format!("parameter {i} has no gradient; run backward first"))
            })?;
            if g.len() != self.velocity[i].len() {
                return Err(Error::shape(format!(
                    "parameter {i} changed size mid-training"
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
            sq_norm += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("validated above").to_vec();
            let v = &mut self.velocity[i];
            for ((vv, gv), pv) in v.iter_mut().zip(&g).zip(p.data_mut()) {
                *vv = self.momentum * *vv + gv * scale;
                *pv -= self.lr * *vv;
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {i} after update")));
            }
            p.zero_grad();
        }
        Ok(())
    }
}

fn validate_lr(lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::config(format!("learning rate {lr} must be finite and >= 0")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>) -> Tensor {
        Tensor::new(&[data.len()], data).unwrap().with_requires_grad()
    }

    #[test]
    fn plain_sgd_descends_a_quadratic() {
        // f(p) = 0.5 * p^2, grad = p; lr 0.1 decays p by 0.9 each step.
        let mut p = param(vec![1.0]);
        let mut opt = SgdState::new(0.1, 0.0, f64::INFINITY).unwrap();
        for _ in 0..10 {
            let g = p.data()[0];
            p.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data()[0] - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // Constant gradient 1, lr 1: updates are 1, 1.5, 1.75 with mu = 0.5.
        let mut p = param(vec![0.0]);
        let mut opt = SgdState::new(1.0, 0.5, f64::INFINITY).unwrap();
        let mut positions = Vec::new();
        for _ in 0..3 {
            p.accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            positions.push(p.data()[0]);
        }
        assert_eq!(positions, vec![-1.0, -2.5, -4.25]);
    }

    #[test]
    fn zero_lr_is_a_no_op_even_with_momentum() {
        let mut p = param(vec![3.5, -2.0]);
        let before = p.data().to_vec();
        let mut opt = SgdState::new(0.0, 0.9, f64::INFINITY).unwrap();
        for _ in 0..5 {
            p.accumulate_grad(&[1.0, -1.0]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = param(vec![1.0]);
        let mut opt = SgdState::new(0.1, 0.0, f64::INFINITY).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Train(_))));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(SgdState::new(-0.1, 0.0, f64::INFINITY).is_err());
        assert!(SgdState::new(f64::NAN, 0.0, f64::INFINITY).is_err());
        assert!(SgdState::new(0.1, 1.0, f64::INFINITY).is_err());
        assert!(SgdState::new(0.1, -0.1, f64::INFINITY).is_err());
        assert!(SgdState::new(0.1, 0.9, 0.0).is_err());
        assert!(SgdState::new(0.1, 0.9, -5.0).is_err());
        assert!(SgdState::new(0.1, 0.9, f64::NAN).is_err());
        let mut s = SgdState::new(0.1, 0.9, f64::INFINITY).unwrap();
        assert!(s.set_lr(-1.0).is_err());
        assert!(s.set_lr(0.01).is_ok());
    }

    #[test]
    fn clipping_rescales_the_joint_gradient_onto_the_ceiling() {
        // Two parameters with joint gradient (3, 4), norm 5. Ceiling 1 scales
        // both components by 1/5; lr 1 applies the scaled step directly.
        let mut a = param(vec![0.0]);
        let mut b = param(vec![0.0]);
        let mut opt = SgdState::new(1.0, 0.0, 1.0).unwrap();
        a.accumulate_grad(&[3.0]).unwrap();
        b.accumulate_grad(&[4.0]).unwrap();
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!((a.data()[0] + 0.6).abs() < 1e-12);
        assert!((b.data()[0] + 0.8).abs() < 1e-12);

        // A gradient already under the ceiling passes through untouched.
        a.accumulate_grad(&[0.3]).unwrap();
        b.accumulate_grad(&[0.4]).unwrap();
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!((a.data()[0] + 0.9).abs() < 1e-12);
        assert!((b.data()[0] + 1.2).abs() < 1e-12);
    }

    #[test]
    fn step_consumes_gradients() {
        let mut p = param(vec![1.0]);
        let mut opt = SgdState::new(0.1, 0.0, f64::INFINITY).unwrap();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.grad().is_none());
    }
}
