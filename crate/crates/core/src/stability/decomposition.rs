//! Nested Monte-Carlo split of prompt-marginalized mask variance into a
//! local-sensitivity term and a prompt-ambiguity term.

use serde::{Deserialize, Serialize};

use crate::ambiguity::{sample_prompts, MixtureParams};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::prompts::{perturb, PerturbationSpec, PromptBox};
use crate::segmenters::{ImageRef, Segmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceMap {
    pub values: Vec<f64>,
    pub mean: f64,
}

impl VarianceMap {
    fn new(values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        Self { values, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub height: usize,
    pub width: usize,
    /// `E_B[Var_Δ]` per pixel.
    pub local: VarianceMap,
    /// `Var_B[E_Δ]` per pixel.
    pub ambiguity: VarianceMap,
    /// Variance over all `(i, j)` samples per pixel.
    pub total: VarianceMap,
    pub n_b: usize,
    pub n_delta: usize,
}

/// Population mean and variance, both taken relative to the first value so
/// that a constant sample yields exactly zero variance.
fn pixel_stats(values: &[f64]) -> (f64, f64) {
    let Some(&first) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let shift = values.iter().map(|x| x - first).sum::<f64>() / n;
    let var = values.iter().map(|x| (x - first - shift).powi(2)).sum::<f64>() / n;
    (first + shift, var)
}

/// Decomposes per-pixel mask variance over `B_i ~ mix` and `Δ_ij ~ Q_δ`.
pub fn variance_decomposition(
    seg: &dyn Segmenter,
    image: &ImageRef,
    prompt_source: &MixtureParams,
    spec: &PerturbationSpec,
    n_b: usize,
    n_delta: usize,
    rng: &Rng,
) -> Result<VarianceDecomposition> {
    if n_b < 2 || n_delta < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance decomposition needs n_B >= 2 and n_delta >= 2, got {n_b} and {n_delta}"
        )));
    }
    let centers = sample_prompts(prompt_source, n_b, &mut rng.named("prompts"))?;
    // Every center reuses the same perturbation draws, so identical centers
    // give identical inner means and a point source has zero ambiguity.
    let perturb_root = rng.named("perturbations");
    let mut boxes: Vec<PromptBox> = Vec::with_capacity(n_b * n_delta);
    for b in &centers {
        let mut r = perturb_root.clone();
        boxes.extend((0..n_delta).map(|_| perturb(b, spec, &mut r)));
    }
    let masks = seg.segment_batch(image, &boxes)?;
    if masks.len() != boxes.len() {
        return Err(Error::Segmenter {
            index: masks.len(),
            message: format!("expected {} masks, got {}", boxes.len(), masks.len()),
        });
    }
    let (height, width) = masks[0].shape();
    let npix = height * width;
    if let Some(i) = masks.iter().position(|m| m.shape() != (height, width)) {
        return Err(Error::Segmenter {
            index: i,
            message: format!("mask shape {:?} differs from {:?}", masks[i].shape(), (height, width)),
        });
    }
    let mut local = vec![0.0; npix];
    let mut ambiguity = vec![0.0; npix];
    let mut total = vec![0.0; npix];
    let mut all = vec![0.0; n_b * n_delta];
    let mut inner_means = vec![0.0; n_b];
    let mut inner = vec![0.0; n_delta];
    for p in 0..npix {
        for (k, m) in masks.iter().enumerate() {
            all[k] = m.probs()[p];
        }
        let mut local_sum = 0.0;
        for i in 0..n_b {
            inner.copy_from_slice(&all[i * n_delta..(i + 1) * n_delta]);
            let (m, v) = pixel_stats(&inner);
            inner_means[i] = m;
            local_sum += v;
        }
        local[p] = local_sum / n_b as f64;
        ambiguity[p] = pixel_stats(&inner_means).1;
        total[p] = pixel_stats(&all).1;
    }
    Ok(VarianceDecomposition {
        height,
        width,
        local: VarianceMap::new(local),
        ambiguity: VarianceMap::new(ambiguity),
        total: VarianceMap::new(total),
        n_b,
        n_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{box_to_reparam, PerturbationKind};
    use crate::segmenters::{Ellipse, SyntheticScene, SyntheticSegmenter};

    fn image() -> ImageRef {
        ImageRef::from_scene(SyntheticScene {
            id: "v".into(),
            object: Ellipse {
                center: [0.48, 0.52],
                radii: [0.12, 0.1],
                softness: 0.03,
            },
            distractor: None,
            modes: Vec::new(),
        })
    }

    fn source(var: f64) -> MixtureParams {
        let u = box_to_reparam(&PromptBox::new(0.35, 0.4, 0.61, 0.63).unwrap()).unwrap();
        let mut other = u.0;
        other[0] += 0.3;
        MixtureParams::new(vec![0.6, 0.4], vec![u.0, other], vec![[var; 4]; 2]).unwrap()
    }

    #[test]
    fn identity_holds_per_pixel() {
        let seg = SyntheticSegmenter::default();
        let spec = PerturbationSpec::new(PerturbationKind::Translation, 0.02).unwrap();
        let d = variance_decomposition(&seg, &image(), &source(0.01), &spec, 16, 8, &Rng::new(3)).unwrap();
        for p in 0..d.total.values.len() {
            let gap = (d.local.values[p] + d.ambiguity.values[p] - d.total.values[p]).abs();
            assert!(gap <= 1e-12, "pixel {p}: {gap}");
            assert!(d.local.values[p] >= 0.0 && d.ambiguity.values[p] >= 0.0);
        }
        assert!(d.local.mean > 0.0 && d.ambiguity.mean > 0.0);
    }

    #[test]
    fn zero_amplitude_has_no_local_term() {
        let seg = SyntheticSegmenter::default();
        let spec = PerturbationSpec::new(PerturbationKind::Scale, 0.0).unwrap();
        let d = variance_decomposition(&seg, &image(), &source(0.01), &spec, 8, 4, &Rng::new(1)).unwrap();
        assert!(d.local.values.iter().all(|&v| v == 0.0));
        for (a, t) in d.ambiguity.values.iter().zip(&d.total.values) {
            assert!((a - t).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_source_and_zero_amplitude_vanish() {
        let seg = SyntheticSegmenter::default();
        let u = box_to_reparam(&PromptBox::new(0.35, 0.4, 0.61, 0.63).unwrap()).unwrap();
        let point = MixtureParams::single(u.0, [1e-12; 4]).unwrap();
        let spec = PerturbationSpec::new(PerturbationKind::Translation, 0.0).unwrap();
        let d = variance_decomposition(&seg, &image(), &point, &spec, 6, 3, &Rng::new(2)).unwrap();
        for m in [&d.local, &d.ambiguity, &d.total] {
            assert!(m.values.iter().all(|&v| v <= 1e-10));
        }
    }

    #[test]
    fn rejects_tiny_samples() {
        let seg = SyntheticSegmenter::default();
        let spec = PerturbationSpec::new(PerturbationKind::Translation, 0.01).unwrap();
        assert!(variance_decomposition(&seg, &image(), &source(0.01), &spec, 1, 4, &Rng::new(0)).is_err());
    }

    #[test]
    fn constant_sample_has_exactly_zero_variance() {
        let v = [0.1 + 0.2; 7];
        assert_eq!(pixel_stats(&v), (v[0], 0.0));
    }
}
