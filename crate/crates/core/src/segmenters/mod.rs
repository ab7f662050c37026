//! Promptable segmenters `S(I, b) -> soft mask`: the analytic synthetic
//! segmenter and the file-based adapter for external models.

pub mod external;
pub mod mask;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use external::{ExternalHandle, ExternalSegmenter};
pub use mask::{dice, mean_abs_difference, SoftMask, DEFAULT_THRESHOLD};
pub use synthetic::{synth_segment, AmbiguityMode, Ellipse, SceneRaster, SyntheticScene, DEFAULT_RESOLUTION};

use crate::error::{Error, Result};
use crate::prompts::PromptBox;

/// What a segmenter needs to know about an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// Path or identifier handed to external segmenters; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SyntheticScene>,
}

impl ImageRef {
    pub fn from_scene(scene: SyntheticScene) -> Self {
        Self {
            id: scene.id.clone(),
            path: None,
            scene: Some(scene),
        }
    }

    pub fn external_ref(&self) -> &str {
        self.path.as_deref().unwrap_or(&self.id)
    }
}

/// A frozen promptable segmentation model.
pub trait Segmenter {
    fn resolution(&self) -> (usize, usize);

    /// Segments `image` once per box, preserving order.
    fn segment_batch(&self, image: &ImageRef, boxes: &[PromptBox]) -> Result<Vec<SoftMask>>;

    fn segment(&self, image: &ImageRef, b: &PromptBox) -> Result<SoftMask> {
        let mut v = self.segment_batch(image, std::slice::from_ref(b))?;
        v.pop().ok_or_else(|| Error::Segmenter {
            index: 0,
            message: "segmenter returned no mask".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSegmenter {
    pub resolution: (usize, usize),
}

impl Default for SyntheticSegmenter {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl Segmenter for SyntheticSegmenter {
    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn segment_batch(&self, image: &ImageRef, boxes: &[PromptBox]) -> Result<Vec<SoftMask>> {
        let scene = image.scene.as_ref().ok_or_else(|| Error::Segmenter {
            index: 0,
            message: format!("image '{}' has no synthetic scene", image.id),
        })?;
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let raster = SceneRaster::new(scene, self.resolution);
        Ok(boxes.iter().map(|b| raster.segment(b)).collect())
    }
}

impl Segmenter for ExternalSegmenter {
    fn resolution(&self) -> (usize, usize) {
        self.handle().resolution
    }

    fn segment_batch(&self, image: &ImageRef, boxes: &[PromptBox]) -> Result<Vec<SoftMask>> {
        let requests: Vec<(String, PromptBox)> = boxes.iter().map(|b| (image.external_ref().to_string(), *b)).collect();
        self.run(&requests)
    }
}

/// Either segmenter kind behind one type, as selected on the command line.
#[derive(Debug)]
pub enum AnySegmenter {
    Synthetic(SyntheticSegmenter),
    External(ExternalSegmenter),
}

impl Segmenter for AnySegmenter {
    fn resolution(&self) -> (usize, usize) {
        match self {
            AnySegmenter::Synthetic(s) => s.resolution(),
            AnySegmenter::External(s) => s.resolution(),
        }
    }

    fn segment_batch(&self, image: &ImageRef, boxes: &[PromptBox]) -> Result<Vec<SoftMask>> {
        match self {
            AnySegmenter::Synthetic(s) => s.segment_batch(image, boxes),
            AnySegmenter::External(s) => s.segment_batch(image, boxes),
        }
    }
}
