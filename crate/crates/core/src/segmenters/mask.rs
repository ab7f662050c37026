use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `height × width` foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::shape("soft mask", format!("{height}x{width}"), probs.len()));
        }
        if let Some((i, v)) = probs.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability out of range at pixel {i}: {v}"
            )));
        }
        Ok(Self { height, width, probs })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            probs: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width);
        Self { height, width, probs }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Strict `p > threshold`.
    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.probs.iter().map(|&p| p > threshold).collect()
    }

    pub fn foreground_count(&self, threshold: f64) -> usize {
        self.probs.iter().filter(|&&p| p > threshold).count()
    }

    pub fn mean(&self) -> f64 {
        if self.probs.is_empty() {
            return 0.0;
        }
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }
}

fn check_same_shape(a: &SoftMask, b: &SoftMask, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Dice overlap of two masks binarized at `threshold`; two empty masks have
/// Dice 1.
pub fn dice(a: &SoftMask, b: &SoftMask, threshold: f64) -> Result<f64> {
    check_same_shape(a, b, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&pa, &pb) in a.probs.iter().zip(&b.probs) {
        let fa = pa > threshold;
        let fb = pb > threshold;
        na += fa as usize;
        nb += fb as usize;
        inter += (fa && fb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean absolute difference of probabilities.
pub fn mean_abs_difference(a: &SoftMask, b: &SoftMask) -> Result<f64> {
    check_same_shape(a, b, "mean absolute difference")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
