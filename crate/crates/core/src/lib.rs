//! Prompt-dependence analysis for promptable segmentation models.
//!
//! Prompt ambiguity is measured as the dispersion of an image-conditioned
//! mixture over plausible box prompts; local sensitivity as the stability
//! margin of the mask under small box perturbations. Both combine into a
//! law-of-total-variance decomposition and into per-pixel uncertainty maps.

pub mod ambiguity;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod io;
pub mod numerics;
pub mod prompts;
pub mod segmenters;
pub mod stability;
pub mod uncertainty;

pub use error::{Error, Result};
