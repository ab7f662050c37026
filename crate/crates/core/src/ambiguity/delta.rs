//! First-order propagation of prompt dispersion through a scalar mask summary.

use super::mixture::{mixture_moments, MixtureParams, PROMPT_DIM};
use crate::error::{Error, Result};
use crate::prompts::{reparam_to_box, PromptBox, ReparamPrompt};

/// `∇fᵀ Σ ∇f`, with `∇f` taken by central differences in u-space at the
/// mixture mean and `Σ` the mixture covariance.
pub fn delta_method_variance<F>(mut f: F, mix: &MixtureParams, h: f64) -> Result<f64>
where
    F: FnMut(&PromptBox) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    mix.validate()?;
    let (mean, cov) = mixture_moments(mix);
    let mut eval = |u: [f64; PROMPT_DIM]| -> Result<f64> {
        let (b, _) = reparam_to_box(&ReparamPrompt(u))?;
        let v = f(&b)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("mask summary at {:?}", b.to_array())))
        }
    };
    let mut grad = [0.0; PROMPT_DIM];
    for d in 0..PROMPT_DIM {
        let mut up = mean;
        let mut dn = mean;
        up[d] += h;
        dn[d] -= h;
        grad[d] = (eval(up)? - eval(dn)?) / (2.0 * h);
    }
    let mut total = 0.0;
    for i in 0..PROMPT_DIM {
        for j in 0..PROMPT_DIM {
            total += grad[i] * cov[i][j] * grad[j];
        }
    }
    Ok(total)
}
