//! Unconditional diagonal GMMs over reparameterized prompts: EM fitting with
//! k-means++ seeding, and BIC selection of the component count.

use log::warn;
use serde::{Deserialize, Serialize};

use super::mixture::{MixtureParams, PROMPT_DIM};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Rng};
use crate::prompts::ReparamPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Convergence threshold on the mean per-sample log-likelihood gain.
    pub tol: f64,
    pub var_floor: f64,
    /// Independent seedings; the fit with the highest likelihood is kept.
    pub n_init: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-7,
            var_floor: 1e-6,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub mixture: MixtureParams,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.mixture.k()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Total log-likelihood of the data under the returned model.
    pub log_likelihood: f64,
    /// Total log-likelihood at every E-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, component)` pairs re-seeded after emptying out.
    pub reseeds: Vec<(usize, usize)>,
}

fn sq_dist(a: &[f64; PROMPT_DIM], b: &[f64; PROMPT_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeanspp(data: &[[f64; PROMPT_DIM]], k: usize, rng: &mut Rng) -> Vec<[f64; PROMPT_DIM]> {
    let mut centers = vec![data[rng.below(data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            rng.categorical(&d2)
        } else {
            rng.below(data.len())
        };
        let c = data[idx];
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// E-step: responsibilities (row-major `n × k`) and total log-likelihood.
fn e_step(mix: &MixtureParams, data: &[[f64; PROMPT_DIM]], resp: &mut [f64]) -> (f64, Vec<f64>) {
    let k = mix.k();
    let mut total = 0.0;
    let mut per_point = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        let l = mix.component_log_joint(x);
        let z = log_sum_exp(&l);
        for c in 0..k {
            resp[i * k + c] = (l[c] - z).exp();
        }
        total += z;
        per_point.push(z);
    }
    (total, per_point)
}

fn fit_once(data: &[[f64; PROMPT_DIM]], k: usize, cfg: &GmmConfig, rng: &mut Rng) -> Result<GmmFit> {
    let n = data.len();
    let nf = n as f64;
    let mut global_mean = [0.0; PROMPT_DIM];
    for x in data {
        for d in 0..PROMPT_DIM {
            global_mean[d] += x[d] / nf;
        }
    }
    let mut global_var = [0.0; PROMPT_DIM];
    for x in data {
        for d in 0..PROMPT_DIM {
            global_var[d] += (x[d] - global_mean[d]).powi(2) / nf;
        }
    }
    let init_var = global_var.map(|v| v.max(cfg.var_floor));
    let mut mix = MixtureParams {
        weights: vec![1.0 / k as f64; k],
        means: kmeanspp(data, k, rng),
        variances: vec![init_var; k],
    };
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let (mut ll, mut per_point) = e_step(&mix, data, &mut resp);
    trace.push(ll);
    for it in 1..=cfg.max_iter {
        iterations = it;
        // M-step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-10 {
                // Re-seed from the worst-explained point.
                let worst = per_point
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                warn!("GMM component {c} emptied at iteration {it}; re-seeding from point {worst}");
                reseeds.push((it, c));
                mix.means[c] = data[worst];
                mix.variances[c] = init_var;
                mix.weights[c] = 1.0 / nf;
                continue;
            }
            mix.weights[c] = nk / nf;
            let mut mean = [0.0; PROMPT_DIM];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..PROMPT_DIM {
                    mean[d] += r * x[d];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = [0.0; PROMPT_DIM];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..PROMPT_DIM {
                    var[d] += r * (x[d] - mean[d]).powi(2);
                }
            }
            mix.means[c] = mean;
            mix.variances[c] = var.map(|v| (v / nk).max(cfg.var_floor));
        }
        let total_w: f64 = mix.weights.iter().sum();
        mix.weights.iter_mut().for_each(|w| *w /= total_w);

        let (new_ll, pp) = e_step(&mix, data, &mut resp);
        per_point = pp;
        trace.push(new_ll);
        let gain = (new_ll - ll) / nf;
        ll = new_ll;
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!("GMM log-likelihood at iteration {it}")));
        }
        if gain.abs() < cfg.tol && reseeds.last().is_none_or(|&(r, _)| r != it) {
            converged = true;
            break;
        }
    }
    mix.validate()?;
    Ok(GmmFit {
        model: GmmModel { mixture: mix },
        log_likelihood: ll,
        trace,
        iterations,
        converged,
        reseeds,
    })
}

pub fn gmm_em_fit(data: &[ReparamPrompt], k: usize, seed: u64, cfg: &GmmConfig) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("GMM needs K >= 1".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "GMM with K={k} needs at least {k} points, got {}",
            data.len()
        )));
    }
    let points: Vec<[f64; PROMPT_DIM]> = data.iter().map(|u| u.0).collect();
    let root = Rng::new(seed);
    let mut best: Option<GmmFit> = None;
    for init in 0..cfg.n_init.max(1) {
        let fit = fit_once(&points, k, cfg, &mut root.substream(init as u64))?;
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one initialization"))
}

/// `(K - 1) + 4K + 4K` free parameters of a diagonal mixture in 4 dimensions.
pub fn gmm_free_params(k: usize) -> usize {
    (k - 1) + 2 * PROMPT_DIM * k
}

pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    gmm_free_params(k) as f64 * (n as f64).ln() - 2.0 * log_likelihood
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub log_likelihood: f64,
    pub free_params: usize,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKOutcome {
    pub best_k: usize,
    pub rows: Vec<BicRow>,
}

/// Fits every candidate `K` and returns the BIC minimizer (ties to smaller K).
pub fn select_k(data: &[ReparamPrompt], candidates: &[usize], seed: u64, cfg: &GmmConfig) -> Result<SelectKOutcome> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("select_k needs at least one candidate".into()));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let root = Rng::new(seed);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let fit = gmm_em_fit(data, k, root.substream(k as u64).seed(), cfg)?;
        rows.push(BicRow {
            k,
            log_likelihood: fit.log_likelihood,
            free_params: gmm_free_params(k),
            bic: bic(fit.log_likelihood, k, data.len()),
        });
    }
    let best = rows
        .iter()
        .fold(None::<&BicRow>, |acc, r| match acc {
            Some(b) if b.bic <= r.bic => Some(b),
            _ => Some(r),
        })
        .expect("non-empty");
    Ok(SelectKOutcome { best_k: best.k, rows })
}
