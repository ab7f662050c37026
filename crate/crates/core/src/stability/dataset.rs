//! Oracle-margin records for a set of images, around one representative
//! prompt per image.

use log::warn;
use serde::{Deserialize, Serialize};

use super::oracle::{g_curve, margin_from_curve, validate_tau, MarginRecord, OracleConfig};
use crate::ambiguity::{mdn_forward, sample_prompts, MdnModel};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::prompts::{reparam_to_box, PromptBox, ReparamPrompt};
use crate::segmenters::{ImageRef, Segmenter};

/// Where the reference prompt of a margin query comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptChoice {
    /// Mean of the highest-weight MDN component.
    #[default]
    MixtureMode,
    /// One draw from the MDN mixture.
    Sampled,
    /// The image's first annotated box.
    GroundTruth,
}

impl std::str::FromStr for PromptChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture_mode" | "mode" => Ok(PromptChoice::MixtureMode),
            "sampled" => Ok(PromptChoice::Sampled),
            "ground_truth" | "gt" => Ok(PromptChoice::GroundTruth),
            other => Err(Error::InvalidArgument(format!(
                "unknown prompt choice '{other}' (expected mixture_mode, sampled or ground_truth)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginItem {
    pub image: ImageRef,
    pub embedding: Vec<f64>,
    pub boxes: Vec<PromptBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarginDataset {
    pub records: Vec<MarginRecord>,
    /// `(image id, reason)` for every skipped image.
    pub skipped: Vec<(String, String)>,
}

pub fn representative_prompt(
    item: &MarginItem,
    mdn: Option<&MdnModel>,
    choice: PromptChoice,
    rng: &mut Rng,
) -> Result<PromptBox> {
    let need_mdn = || mdn.ok_or_else(|| Error::InvalidArgument("this prompt choice needs a trained MDN".into()));
    match choice {
        PromptChoice::GroundTruth => item
            .boxes
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("image '{}' has no boxes", item.image.id))),
        PromptChoice::MixtureMode => {
            let mix = mdn_forward(need_mdn()?, &item.embedding)?;
            let top = mix.argmax_weight();
            Ok(reparam_to_box(&ReparamPrompt(mix.means[top]))?.0)
        }
        PromptChoice::Sampled => {
            let mix = mdn_forward(need_mdn()?, &item.embedding)?;
            Ok(sample_prompts(&mix, 1, rng)?[0])
        }
    }
}

/// One record per (image, τ). The discrepancy curve is computed once per
/// image and shared across τ values; each image draws from a stream named
/// after its id, so results do not depend on item order.
pub fn build_margin_dataset(
    seg: &dyn Segmenter,
    items: &[MarginItem],
    mdn: Option<&MdnModel>,
    taus: &[f64],
    choice: PromptChoice,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<MarginDataset> {
    cfg.validate()?;
    if taus.is_empty() {
        return Err(Error::InvalidArgument("at least one tolerance is required".into()));
    }
    for &t in taus {
        validate_tau(t)?;
    }
    let root = Rng::new(seed);
    let mut out = MarginDataset::default();
    for item in items {
        let rng = root.named(&item.image.id);
        let result = representative_prompt(item, mdn, choice, &mut rng.named("prompt"))
            .and_then(|b| g_curve(seg, &item.image, &b, cfg, &rng.named("oracle")).map(|g| (b, g)));
        match result {
            Ok((b, g)) => {
                for &tau in taus {
                    out.records.push(MarginRecord {
                        id: item.image.id.clone(),
                        embedding: item.embedding.clone(),
                        b,
                        tau,
                        delta_star: margin_from_curve(&g, tau),
                        g: g.clone(),
                    });
                }
            }
            Err(e) => {
                warn!("skipping image '{}': {e}", item.image.id);
                out.skipped.push((item.image.id.clone(), e.to_string()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenters::{Ellipse, SyntheticScene, SyntheticSegmenter};

    fn item(id: &str, softness: f64) -> MarginItem {
        let scene = SyntheticScene {
            id: id.into(),
            object: Ellipse {
                center: [0.5, 0.5],
                radii: [0.1, 0.12],
                softness,
            },
            distractor: None,
            modes: Vec::new(),
        };
        let e = scene.object.extent();
        MarginItem {
            image: ImageRef::from_scene(scene),
            embedding: vec![softness],
            boxes: vec![PromptBox::new(e[0], e[1], e[2], e[3]).unwrap()],
        }
    }

    #[test]
    fn empty_split_gives_empty_dataset() {
        let seg = SyntheticSegmenter::default();
        let d = build_margin_dataset(
            &seg,
            &[],
            None,
            &[0.1],
            PromptChoice::GroundTruth,
            &OracleConfig::default(),
            0,
        )
        .unwrap();
        assert!(d.records.is_empty() && d.skipped.is_empty());
    }

    #[test]
    fn records_are_counted_and_replayable() {
        let seg = SyntheticSegmenter::default();
        let mut items = vec![item("a", 0.01), item("b", 0.05)];
        // An image without a scene cannot be segmented synthetically.
        items.push(MarginItem {
            image: ImageRef {
                id: "broken".into(),
                path: None,
                scene: None,
            },
            embedding: vec![0.0],
            boxes: items[0].boxes.clone(),
        });
        let cfg = OracleConfig {
            samples_per_level: 8,
            ..OracleConfig::default()
        };
        let taus = [0.05, 0.1];
        let a = build_margin_dataset(&seg, &items, None, &taus, PromptChoice::GroundTruth, &cfg, 4).unwrap();
        assert_eq!(a.records.len(), items.len() * taus.len() - a.skipped.len() * taus.len());
        assert_eq!(a.skipped.len(), 1);
        let b = build_margin_dataset(&seg, &items, None, &taus, PromptChoice::GroundTruth, &cfg, 4).unwrap();
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
        for r in &a.records {
            r.check().unwrap();
        }
    }

    #[test]
    fn mdn_choices_need_a_model() {
        let seg = SyntheticSegmenter::default();
        let d = build_margin_dataset(
            &seg,
            &[item("a", 0.01)],
            None,
            &[0.1],
            PromptChoice::MixtureMode,
            &OracleConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(d.skipped.len(), 1);
    }
}
