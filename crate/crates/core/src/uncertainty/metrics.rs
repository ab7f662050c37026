//! Quality metrics of an entropy map against ground truth: AUROC of entropy
//! for separating error pixels, entropy gap, and Bernoulli NLL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NLL_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    /// `None` when there are no error or no correct pixels.
    pub auroc: Option<f64>,
    pub mean_entropy: f64,
    /// Mean entropy over error pixels minus mean over correct pixels.
    pub delta_entropy: Option<f64>,
    pub nll: f64,
    pub error_pixels: usize,
    pub pixels: usize,
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)`, ties counted half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Mid-rank of the tied block, 1-based.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Per-pixel Bernoulli NLL of `p` against binary `gt`, with clipping.
pub fn bernoulli_nll(p: &[f64], gt: &[bool]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(gt)
        .map(|(&q, &y)| {
            let q = q.clamp(NLL_CLIP, 1.0 - NLL_CLIP);
            if y {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    total / p.len().max(1) as f64
}

/// Error pixels are where the ensemble prediction `p̄ > 0.5` disagrees with `gt`.
pub fn map_metrics(entropy: &[f64], mean_prob: &[f64], gt: &[bool]) -> Result<MapMetrics> {
    if entropy.len() != mean_prob.len() || entropy.len() != gt.len() {
        return Err(Error::shape(
            "map metrics",
            format!("{} pixels in every map", entropy.len()),
            format!("{} / {} / {}", entropy.len(), mean_prob.len(), gt.len()),
        ));
    }
    if entropy.is_empty() {
        return Err(Error::InvalidArgument("empty map".into()));
    }
    let errors: Vec<bool> = mean_prob.iter().zip(gt).map(|(&p, &y)| (p > 0.5) != y).collect();
    let n_err = errors.iter().filter(|&&e| e).count();
    let n = entropy.len();
    let delta_entropy = if n_err == 0 || n_err == n {
        None
    } else {
        let (mut se, mut sc) = (0.0, 0.0);
        for (h, &e) in entropy.iter().zip(&errors) {
            if e {
                se += h;
            } else {
                sc += h;
            }
        }
        Some(se / n_err as f64 - sc / (n - n_err) as f64)
    };
    Ok(MapMetrics {
        auroc: auroc(entropy, &errors),
        mean_entropy: entropy.iter().sum::<f64>() / n as f64,
        delta_entropy,
        nll: bernoulli_nll(mean_prob, gt),
        error_pixels: n_err,
        pixels: n,
    })
}
