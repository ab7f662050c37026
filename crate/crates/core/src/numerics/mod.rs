//! Dense numeric kernels: matrices, a two-layer MLP with manual
//! backpropagation, Adam, seeded RNG streams and a finite-difference checker.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod rng;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_with_skip, GradCheckReport};
pub use matrix::DenseMatrix;
pub use mlp::{mlp_backward, mlp_backward_into, mlp_forward, MlpCache, MlpParams, DEFAULT_HIDDEN};
pub use rng::Rng;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
