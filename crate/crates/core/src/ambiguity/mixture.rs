//! Diagonal Gaussian mixtures over reparameterized prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Rng};
use crate::prompts::{reparam_to_box, PromptBox, ReparamPrompt};

/// Dimension of the prompt space.
pub const PROMPT_DIM: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; PROMPT_DIM]>,
    pub variances: Vec<[f64; PROMPT_DIM]>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<[f64; PROMPT_DIM]>, variances: Vec<[f64; PROMPT_DIM]>) -> Result<Self> {
        let m = Self {
            weights,
            means,
            variances,
        };
        m.validate()?;
        Ok(m)
    }

    /// Single component at `mean` with diagonal `var`.
    pub fn single(mean: [f64; PROMPT_DIM], var: [f64; PROMPT_DIM]) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::shape(
                "mixture components",
                k,
                format!("{} means / {} variances", self.means.len(), self.variances.len()),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if self.variances.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixture variances must be positive and finite".into(),
            ));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means".into()));
        }
        Ok(())
    }

    /// `log π_k + log N(u; μ_k, diag σ²_k)` for every component.
    pub fn component_log_joint(&self, u: &[f64; PROMPT_DIM]) -> Vec<f64> {
        (0..self.k())
            .map(|k| self.weights[k].ln() + diag_gauss_log_pdf(u, &self.means[k], &self.variances[k]))
            .collect()
    }

    pub fn log_pdf(&self, u: &[f64; PROMPT_DIM]) -> f64 {
        log_sum_exp(&self.component_log_joint(u))
    }

    /// Posterior component probabilities for `u`.
    pub fn responsibilities(&self, u: &[f64; PROMPT_DIM]) -> Vec<f64> {
        let l = self.component_log_joint(u);
        let z = log_sum_exp(&l);
        l.iter().map(|v| (v - z).exp()).collect()
    }

    pub fn argmax_weight(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample_u(&self, rng: &mut Rng) -> [f64; PROMPT_DIM] {
        let k = rng.categorical(&self.weights);
        let mut u = [0.0; PROMPT_DIM];
        for d in 0..PROMPT_DIM {
            u[d] = self.means[k][d] + self.variances[k][d].sqrt() * rng.normal();
        }
        u
    }
}

pub fn diag_gauss_log_pdf(u: &[f64; PROMPT_DIM], mean: &[f64; PROMPT_DIM], var: &[f64; PROMPT_DIM]) -> f64 {
    let mut s = 0.0;
    for d in 0..PROMPT_DIM {
        let r = u[d] - mean[d];
        s += LN_2PI + var[d].ln() + r * r / var[d];
    }
    -0.5 * s
}

/// `-log Σ_k π_k Π_d N(u_d; μ_kd, σ²_kd)` via log-sum-exp.
pub fn mdn_nll(mix: &MixtureParams, u: &ReparamPrompt) -> f64 {
    -mix.log_pdf(&u.0)
}

/// Mean and covariance by the law of total covariance.
pub fn mixture_moments(mix: &MixtureParams) -> ([f64; PROMPT_DIM], [[f64; PROMPT_DIM]; PROMPT_DIM]) {
    let mut mean = [0.0; PROMPT_DIM];
    for (w, mu) in mix.weights.iter().zip(&mix.means) {
        for d in 0..PROMPT_DIM {
            mean[d] += w * mu[d];
        }
    }
    // Σ_k π_k [diag σ²_k + (μ_k - m)(μ_k - m)ᵀ]: the centered form of
    // Σ π (diag σ² + μμᵀ) - m mᵀ, without its cancellation.
    let mut cov = [[0.0; PROMPT_DIM]; PROMPT_DIM];
    for ((w, mu), var) in mix.weights.iter().zip(&mix.means).zip(&mix.variances) {
        let c: Vec<f64> = (0..PROMPT_DIM).map(|d| mu[d] - mean[d]).collect();
        for i in 0..PROMPT_DIM {
            cov[i][i] += w * var[i];
            for j in i..PROMPT_DIM {
                cov[i][j] += w * c[i] * c[j];
            }
        }
    }
    for i in 0..PROMPT_DIM {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    (mean, cov)
}

/// `U_amb = tr Cov` of the mixture, in reparameterized prompt space.
pub fn ambiguity_score(mix: &MixtureParams) -> f64 {
    let (_, cov) = mixture_moments(mix);
    (0..PROMPT_DIM).map(|d| cov[d][d]).sum()
}

/// Ancestral samples decoded to (clamped) boxes.
pub fn sample_prompts(mix: &MixtureParams, n: usize, rng: &mut Rng) -> Result<Vec<PromptBox>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_prompts needs n >= 1".into()));
    }
    (0..n)
        .map(|_| reparam_to_box(&ReparamPrompt(mix.sample_u(rng))).map(|(b, _)| b))
        .collect()
}

/// Trace of the covariance of sampled boxes `(x1, y1, x2, y2)`: a box-space
/// counterpart of [`ambiguity_score`] that includes clamping.
pub fn box_space_trace(mix: &MixtureParams, n: usize, rng: &mut Rng) -> Result<f64> {
    let boxes = sample_prompts(mix, n.max(2), rng)?;
    let nf = boxes.len() as f64;
    let mut trace = 0.0;
    for d in 0..4 {
        let mean = boxes.iter().map(|b| b.to_array()[d]).sum::<f64>() / nf;
        trace += boxes.iter().map(|b| (b.to_array()[d] - mean).powi(2)).sum::<f64>() / nf;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mix(seed: u64, k: usize) -> MixtureParams {
        let mut rng = Rng::new(seed);
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.2, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let means = (0..k)
            .map(|_| std::array::from_fn(|_| rng.uniform_in(-1.5, 1.5)))
            .collect();
        let variances = (0..k)
            .map(|_| std::array::from_fn(|_| rng.uniform_in(0.01, 0.3)))
            .collect();
        MixtureParams::new(weights, means, variances).unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let mix = MixtureParams::single([0.1, -0.2, 0.3, 0.4], [1.0; 4]).unwrap();
        let nll = mdn_nll(&mix, &ReparamPrompt([0.1, -0.2, 0.3, 0.4]));
        assert!((nll - 3.675_754_132_818_691).abs() < 1e-12);
    }

    #[test]
    fn identical_components_collapse() {
        let one = MixtureParams::single([0.5, 0.0, -1.0, -1.0], [0.2, 0.1, 0.3, 0.05]).unwrap();
        let two = MixtureParams::new(vec![0.5, 0.5], vec![one.means[0]; 2], vec![one.variances[0]; 2]).unwrap();
        let u = ReparamPrompt([0.1, 0.2, -0.8, -1.2]);
        assert!((mdn_nll(&one, &u) - mdn_nll(&two, &u)).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_density() {
        for seed in 0..10 {
            let mix = random_mix(seed, 3);
            let u = ReparamPrompt(std::array::from_fn(|d| 0.1 * d as f64 - 0.2));
            let mut density = 0.0;
            for k in 0..mix.k() {
                let mut p = mix.weights[k];
                for d in 0..4 {
                    let v = mix.variances[k][d];
                    let r = u.0[d] - mix.means[k][d];
                    p *= (-(r * r) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                density += p;
            }
            assert!((mdn_nll(&mix, &u) + density.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn single_component_covariance_is_diagonal() {
        let mix = MixtureParams::single([1.0, 2.0, 3.0, 4.0], [0.01, 0.01, 0.04, 0.04]).unwrap();
        let (mean, cov) = mixture_moments(&mix);
        assert_eq!(mean, [1.0, 2.0, 3.0, 4.0]);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { mix.variances[0][i] } else { 0.0 };
                assert!((cov[i][j] - e).abs() < 1e-15);
            }
        }
        assert!((ambiguity_score(&mix) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_point_mixture() {
        let m = [0.3, -0.1, 0.2, 0.5];
        let var = [0.02, 0.03, 0.01, 0.04];
        let mix = MixtureParams::new(vec![0.5, 0.5], vec![m, m.map(|v| -v)], vec![var, var]).unwrap();
        let (_, cov) = mixture_moments(&mix);
        for i in 0..4 {
            for j in 0..4 {
                let e = m[i] * m[j] + if i == j { var[i] } else { 0.0 };
                assert!((cov[i][j] - e).abs() < 1e-15);
            }
        }
        let norm2: f64 = m.iter().map(|v| v * v).sum();
        assert!((ambiguity_score(&mix) - (var.iter().sum::<f64>() + norm2)).abs() < 1e-14);
        let alone = MixtureParams::single(m, var).unwrap();
        assert!(ambiguity_score(&mix) > ambiguity_score(&alone));
    }

    #[test]
    fn score_invariant_under_relabel_and_split() {
        let mix = random_mix(4, 3);
        let mut perm = mix.clone();
        perm.weights.rotate_left(1);
        perm.means.rotate_left(1);
        perm.variances.rotate_left(1);
        assert!((ambiguity_score(&mix) - ambiguity_score(&perm)).abs() < 1e-13);
        let mut split = mix.clone();
        split.weights[0] /= 2.0;
        split.weights.push(split.weights[0]);
        split.means.push(split.means[0]);
        split.variances.push(split.variances[0]);
        assert!((ambiguity_score(&mix) - ambiguity_score(&split)).abs() < 1e-13);
    }

    #[test]
    fn covariance_is_positive_semidefinite() {
        for seed in 0..20 {
            let (_, cov) = mixture_moments(&random_mix(seed, 1 + seed as usize % 5));
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(cov[i][j], cov[j][i]);
                }
            }
            // Sylvester: leading principal minors of a PSD matrix are >= 0.
            let m = nalgebra_free_minors(&cov);
            assert!(m.iter().all(|&v| v >= -1e-10), "{m:?}");
        }
    }

    fn nalgebra_free_minors(c: &[[f64; 4]; 4]) -> Vec<f64> {
        // Gaussian elimination pivots equal the ratios of successive minors.
        let mut a = *c;
        let mut pivots = Vec::new();
        for k in 0..4 {
            pivots.push(a[k][k]);
            if a[k][k].abs() < 1e-300 {
                break;
            }
            for i in k + 1..4 {
                let f = a[i][k] / a[k][k];
                for j in k..4 {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        pivots
    }

    #[test]
    fn degenerate_mixture_samples_one_box() {
        let u = [0.2, -0.3, (0.3f64).ln(), (0.25f64).ln()];
        let mix = MixtureParams::single(u, [1e-12; 4]).unwrap();
        let boxes = sample_prompts(&mix, 50, &mut Rng::new(1)).unwrap();
        for b in &boxes {
            for (a, e) in b.to_array().iter().zip(boxes[0].to_array()) {
                assert!((a - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn samples_are_valid_and_reproducible() {
        let mut mix = random_mix(9, 4);
        mix.variances.iter_mut().for_each(|v| v[2] = 4.0);
        let a = sample_prompts(&mix, 500, &mut Rng::new(77)).unwrap();
        let b = sample_prompts(&mix, 500, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|b| b.validate().is_ok()));
    }

    #[test]
    fn component_frequencies_match_weights() {
        let mix = MixtureParams::new(vec![0.3, 0.7], vec![[-3.0; 4], [3.0; 4]], vec![[0.01; 4]; 2]).unwrap();
        let mut rng = Rng::new(12);
        let n = 1_000_000;
        let mut first = 0usize;
        for _ in 0..n {
            if mix.sample_u(&mut rng)[0] < 0.0 {
                first += 1;
            }
        }
        let p = first as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() < 3.0 * se, "{p}");
    }

    #[test]
    fn zero_samples_is_error() {
        let mix = random_mix(1, 1);
        assert!(sample_prompts(&mix, 0, &mut Rng::new(0)).is_err());
    }
}
