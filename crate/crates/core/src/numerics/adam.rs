use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self::with_constants(num_params, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_constants(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Non-finite gradients are rejected before any state is touched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam step",
                self.m.len(),
                format!("params {} / grads {}", params.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} at adam step {}",
                self.step + 1
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            s.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[5.0, -0.2]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Scalar reference: a direct transcription of the Adam recursion.
        let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (w_ref - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut s = AdamState::new(1, 0.1);
        let mut w = vec![0.0];
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            s.step(&mut w, &[g]).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
        assert_eq!(w[0], w_ref);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(s.step(&mut p, &[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = AdamState::new(2, 0.1);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
