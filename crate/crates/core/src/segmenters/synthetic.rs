//! Analytic promptable segmenter over synthetic elliptical scenes.
//!
//! Per pixel `p` (normalized coordinates of the pixel center):
//!
//! ```text
//! object(p) = σ((1 - ‖(p - c) / r‖) / s)
//! window(p) = σ((px - x1)/w) σ((x2 - px)/w) σ((py - y1)/w) σ((y2 - py)/w),  w = 0.02
//! mask(p)   = window(p) · [1 - (1 - object(p)) (1 - gate · distractor(p))]
//! ```
//!
//! `gate` is the window evaluated at the distractor center: a smooth
//! indicator of the distractor lying inside the box, so the mask stays
//! continuous in the box coordinates.

use serde::{Deserialize, Serialize};

use super::mask::SoftMask;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::prompts::PromptBox;

pub const WINDOW_SOFTNESS: f64 = 0.02;
pub const DEFAULT_RESOLUTION: (usize, usize) = (64, 64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub softness: f64,
}

impl Ellipse {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.radii[0] > 0.0 && self.radii[1] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} radii must be > 0, got {:?}",
                self.radii
            )));
        }
        if !(self.softness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} softness must be > 0, got {}",
                self.softness
            )));
        }
        Ok(())
    }

    #[inline]
    fn prob(&self, px: f64, py: f64) -> f64 {
        let dx = (px - self.center[0]) / self.radii[0];
        let dy = (py - self.center[1]) / self.radii[1];
        sigmoid((1.0 - (dx * dx + dy * dy).sqrt()) / self.softness)
    }

    /// Axis-aligned bounding box `[x1, y1, x2, y2]` of the ellipse.
    pub fn extent(&self) -> [f64; 4] {
        [
            self.center[0] - self.radii[0],
            self.center[1] - self.radii[1],
            self.center[0] + self.radii[0],
            self.center[1] + self.radii[1],
        ]
    }
}

/// One plausible ground-truth prompt with its annotator weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityMode {
    #[serde(rename = "box")]
    pub bbox: PromptBox,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub object: Ellipse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<Ellipse>,
    pub modes: Vec<AmbiguityMode>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.object.validate("object")?;
        if let Some(d) = &self.distractor {
            d.validate("distractor")?;
        }
        if !self.modes.is_empty() {
            if self.modes.iter().any(|m| !(m.weight >= 0.0)) {
                return Err(Error::InvalidArgument("ambiguity mode weights must be >= 0".into()));
            }
            let total: f64 = self.modes.iter().map(|m| m.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "ambiguity mode weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Ground truth: the object ellipse thresholded at 0.5, i.e. `‖(p-c)/r‖ < 1`.
    pub fn object_mask(&self, resolution: (usize, usize)) -> SoftMask {
        let (h, w) = resolution;
        let mut probs = Vec::with_capacity(h * w);
        for i in 0..h {
            let py = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let px = (j as f64 + 0.5) / w as f64;
                probs.push(if self.object.prob(px, py) > 0.5 { 1.0 } else { 0.0 });
            }
        }
        SoftMask::from_raw_unchecked(h, w, probs)
    }
}

/// Box-independent part of the scene, rasterized once per resolution.
#[derive(Debug, Clone)]
pub struct SceneRaster {
    height: usize,
    width: usize,
    object: Vec<f64>,
    distractor: Option<(Vec<f64>, [f64; 2])>,
}

impl SceneRaster {
    pub fn new(scene: &SyntheticScene, resolution: (usize, usize)) -> Self {
        let (h, w) = resolution;
        let raster = |e: &Ellipse| {
            let mut v = Vec::with_capacity(h * w);
            for i in 0..h {
                let py = (i as f64 + 0.5) / h as f64;
                for j in 0..w {
                    let px = (j as f64 + 0.5) / w as f64;
                    v.push(e.prob(px, py));
                }
            }
            v
        };
        Self {
            height: h,
            width: w,
            object: raster(&scene.object),
            distractor: scene.distractor.as_ref().map(|d| (raster(d), d.center)),
        }
    }

    pub fn segment(&self, b: &PromptBox) -> SoftMask {
        let (h, w) = (self.height, self.width);
        let inv = 1.0 / WINDOW_SOFTNESS;
        let wx: Vec<f64> = (0..w)
            .map(|j| {
                let px = (j as f64 + 0.5) / w as f64;
                sigmoid((px - b.x1) * inv) * sigmoid((b.x2 - px) * inv)
            })
            .collect();
        let wy: Vec<f64> = (0..h)
            .map(|i| {
                let py = (i as f64 + 0.5) / h as f64;
                sigmoid((py - b.y1) * inv) * sigmoid((b.y2 - py) * inv)
            })
            .collect();
        let mut probs = Vec::with_capacity(h * w);
        match &self.distractor {
            None => {
                for (i, &fy) in wy.iter().enumerate() {
                    let row = &self.object[i * w..(i + 1) * w];
                    probs.extend(row.iter().zip(&wx).map(|(&o, &fx)| o * fx * fy));
                }
            }
            Some((dist, c)) => {
                let gate = window_at(b, c[0], c[1]);
                for (i, &fy) in wy.iter().enumerate() {
                    let row = &self.object[i * w..(i + 1) * w];
                    let drow = &dist[i * w..(i + 1) * w];
                    probs.extend(
                        row.iter()
                            .zip(drow)
                            .zip(&wx)
                            .map(|((&o, &d), &fx)| (1.0 - (1.0 - o) * (1.0 - gate * d)) * fx * fy),
                    );
                }
            }
        }
        SoftMask::from_raw_unchecked(h, w, probs)
    }
}

fn window_at(b: &PromptBox, px: f64, py: f64) -> f64 {
    let inv = 1.0 / WINDOW_SOFTNESS;
    sigmoid((px - b.x1) * inv) * sigmoid((b.x2 - px) * inv) * sigmoid((py - b.y1) * inv) * sigmoid((b.y2 - py) * inv)
}

pub fn synth_segment(scene: &SyntheticScene, b: &PromptBox, resolution: (usize, usize)) -> SoftMask {
    SceneRaster::new(scene, resolution).segment(b)
}
