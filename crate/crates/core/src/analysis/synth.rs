//! Synthetic datasets with planted prompt ambiguity and sensitivity.
//!
//! Every scene is one elliptical object. A seeded subset of exactly
//! `round(n · ambiguity_fraction)` scenes also carries a distractor
//! ellipse next to the object; its annotators split between the tight
//! object box and the union box covering both ellipses. Sensitivity is
//! planted through object radius and edge softness, drawn independently of
//! the ambiguity assignment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::{ManifestRecord, Split};
use crate::io::tensor::write_pdt1;
use crate::numerics::Rng;
use crate::prompts::{box_to_reparam, perturb_with, PerturbationKind, PromptBox};
use crate::segmenters::{AmbiguityMode, Ellipse, SyntheticScene, DEFAULT_RESOLUTION};

/// Leading embedding coordinates carrying scene features; the rest is zero.
pub const CORE_FEATURES: usize = 22;
pub const DEFAULT_EMBEDDING_DIM: usize = 512;
const LAYOUT_MARGIN: f64 = 0.01;
// Fixed so the stream position after placement does not depend on where
// the first fitting direction was found.
const MAX_PLACEMENT_TRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub ambiguity_fraction: f64,
    /// Object edge softness: each scene picks one range uniformly, then
    /// draws log-uniformly inside it.
    pub softness_ranges: Vec<(f64, f64)>,
    pub radius_range: (f64, f64),
    /// Ratio of vertical to horizontal radius.
    pub aspect_range: (f64, f64),
    /// Distractor radius relative to the object radius.
    pub distractor_scale: (f64, f64),
    /// Free space between the object and distractor ellipses.
    pub distractor_gap: (f64, f64),
    /// Annotator share of the union box in ambiguous scenes, before rounding
    /// to whole annotators.
    pub union_weight: (f64, f64),
    pub ambiguous_annotators: usize,
    /// Annotator center noise as a fraction of box size.
    pub annotator_noise: f64,
    pub embedding_dim: usize,
    pub resolution: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 300,
            ambiguity_fraction: 0.5,
            softness_ranges: vec![(0.005, 0.1)],
            radius_range: (0.05, 0.1),
            aspect_range: (0.85, 1.15),
            distractor_scale: (0.8, 1.2),
            distractor_gap: (0.02, 0.05),
            union_weight: (0.35, 0.45),
            ambiguous_annotators: 5,
            annotator_noise: 0.02,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            resolution: DEFAULT_RESOLUTION,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if self.n_scenes == 0 {
            return bad("n_scenes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return bad(format!(
                "ambiguity fraction must lie in [0, 1], got {}",
                self.ambiguity_fraction
            ));
        }
        if self.softness_ranges.is_empty() {
            return bad("at least one softness range is required".into());
        }
        let named = self.softness_ranges.iter().map(|&r| ("softness", r));
        for (name, r) in named.chain([
            ("radius", self.radius_range),
            ("aspect", self.aspect_range),
            ("distractor scale", self.distractor_scale),
            ("distractor gap", self.distractor_gap),
        ]) {
            if !range_ok(r) {
                return bad(format!("{name} range must satisfy 0 < lo <= hi, got {r:?}"));
            }
        }
        let (wl, wh) = self.union_weight;
        if !(0.0 < wl && wl <= wh && wh < 1.0) {
            return bad(format!(
                "union weight range must lie in (0, 1), got {:?}",
                self.union_weight
            ));
        }
        if self.ambiguous_annotators < 2 {
            return bad("ambiguous scenes need at least 2 annotators".into());
        }
        if !(self.annotator_noise >= 0.0 && self.annotator_noise.is_finite()) {
            return bad(format!("annotator noise must be >= 0, got {}", self.annotator_noise));
        }
        if self.embedding_dim < CORE_FEATURES {
            return bad(format!(
                "embedding dim must be >= {CORE_FEATURES}, got {}",
                self.embedding_dim
            ));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return bad("resolution must be positive".into());
        }
        if self.radius_range.1 * self.aspect_range.1.max(1.0) >= 0.2 {
            return bad("radius range too large for the scene layout".into());
        }
        Ok(())
    }
}

/// One generated scene with its split and annotator boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: SyntheticScene,
    pub split: Split,
    pub ambiguous: bool,
    pub boxes: Vec<PromptBox>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub scenes: usize,
    pub ambiguous: usize,
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn log_uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.uniform_in(lo.ln(), hi.ln()).exp()
}

fn pick_softness(rng: &mut Rng, ranges: &[(f64, f64)]) -> f64 {
    let i = if ranges.len() > 1 { rng.below(ranges.len()) } else { 0 };
    log_uniform(rng, ranges[i])
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.uniform_in(lo, hi)
}

fn extent_box(e: [f64; 4]) -> Result<PromptBox> {
    PromptBox::new(e[0], e[1], e[2], e[3])
}

fn union_extent(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

/// Deterministic features of the scene parameters, zero-padded to `dim`.
pub fn scene_embedding(scene: &SyntheticScene, union_share: f64, dim: usize) -> Result<Vec<f64>> {
    let o = &scene.object;
    let obj = o.extent();
    let mut f = vec![
        o.center[0],
        o.center[1],
        o.radii[0],
        o.radii[1],
        o.softness.ln(),
        o.softness,
    ];
    let union = match &scene.distractor {
        Some(d) => {
            f.extend([1.0, d.center[0], d.center[1], d.radii[0], d.radii[1], d.softness.ln()]);
            union_extent(obj, d.extent())
        }
        None => {
            f.extend([0.0; 6]);
            obj
        }
    };
    f.push(union_share);
    f.push((1.0 - union_share).ln());
    f.extend(box_to_reparam(&extent_box(obj)?)?.0);
    f.extend(box_to_reparam(&extent_box(union)?)?.0);
    debug_assert_eq!(f.len(), CORE_FEATURES);
    f.resize(dim, 0.0);
    Ok(f)
}

fn noisy(b: &PromptBox, noise: f64, rng: &mut Rng) -> PromptBox {
    if noise == 0.0 {
        return *b;
    }
    let eps = [
        rng.uniform_in(-noise, noise) * b.width(),
        rng.uniform_in(-noise, noise) * b.height(),
    ];
    perturb_with(b, PerturbationKind::Translation, eps)
}

/// Splits `members` 70/10/20 after a seeded shuffle.
fn assign_splits(members: &mut [usize], rng: &mut Rng, splits: &mut [Split]) {
    rng.shuffle(members);
    let m = members.len();
    let n_train = (0.7 * m as f64).round() as usize;
    let n_val = ((0.1 * m as f64).round() as usize).min(m - n_train);
    for (k, &i) in members.iter().enumerate() {
        splits[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

/// Draws all scenes in memory. Identical configs give identical scenes.
pub fn synth_scenes(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    let n = cfg.n_scenes;
    let root = Rng::new(cfg.seed);
    let n_amb = (n as f64 * cfg.ambiguity_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    root.named("assignment").shuffle(&mut order);
    let mut ambiguous = vec![false; n];
    for &i in &order[..n_amb] {
        ambiguous[i] = true;
    }
    // Stratify the splits by ambiguity so every split sees both kinds.
    let mut splits = vec![Split::Train; n];
    let mut split_rng = root.named("splits");
    for flag in [false, true] {
        let mut members: Vec<usize> = (0..n).filter(|&i| ambiguous[i] == flag).collect();
        assign_splits(&mut members, &mut split_rng, &mut splits);
    }

    let width = n.to_string().len().max(4);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.named("scene").substream(i as u64);
        let r = uniform(&mut rng, cfg.radius_range);
        let radii = [r, r * uniform(&mut rng, cfg.aspect_range)];
        let softness = pick_softness(&mut rng, &cfg.softness_ranges);
        let center = [rng.uniform_in(0.3, 0.7), rng.uniform_in(0.3, 0.7)];
        let object = Ellipse {
            center,
            radii,
            softness,
        };
        let id = format!("scene{i:0width$}");
        let obj_box = extent_box(object.extent())?;
        let mut noise_rng = rng.named("annotators");

        let (scene, boxes, share) = if ambiguous[i] {
            let rd = r * uniform(&mut rng, cfg.distractor_scale);
            let dradii = [rd, rd * uniform(&mut rng, cfg.aspect_range)];
            let gap = uniform(&mut rng, cfg.distractor_gap);
            // Shortest distance along the direction at which the extents are
            // `gap` apart on at least one axis.
            let place = |angle: f64| {
                let (dx, dy) = (angle.cos(), angle.sin());
                let along = |j: usize, d: f64| (radii[j] + dradii[j] + gap) / d.abs().max(1e-9);
                let dist = along(0, dx).min(along(1, dy));
                [center[0] + dx * dist, center[1] + dy * dist]
            };
            let inside = |c: [f64; 2]| {
                (0..2).all(|j| c[j] - dradii[j] > LAYOUT_MARGIN && c[j] + dradii[j] < 1.0 - LAYOUT_MARGIN)
            };
            let mut dcenter = None;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let c = place(rng.uniform_in(0.0, std::f64::consts::TAU));
                if inside(c) && dcenter.is_none() {
                    dcenter = Some(c);
                }
            }
            let dcenter = match dcenter {
                Some(c) => c,
                None => {
                    let c = place((0.5 - center[1]).atan2(0.5 - center[0]));
                    if !inside(c) {
                        return Err(Error::InvalidArgument(format!(
                            "no room for a distractor in scene {id}"
                        )));
                    }
                    c
                }
            };
            let distractor = Ellipse {
                center: dcenter,
                radii: dradii,
                softness: pick_softness(&mut rng, &cfg.softness_ranges),
            };
            let union_box = extent_box(union_extent(object.extent(), distractor.extent()))?;
            let a = cfg.ambiguous_annotators;
            let n_union = ((uniform(&mut rng, cfg.union_weight) * a as f64).round() as usize).clamp(1, a - 1);
            let share = n_union as f64 / a as f64;
            let mut boxes: Vec<PromptBox> = (0..a - n_union)
                .map(|_| noisy(&obj_box, cfg.annotator_noise, &mut noise_rng))
                .collect();
            boxes.extend((0..n_union).map(|_| noisy(&union_box, cfg.annotator_noise, &mut noise_rng)));
            let scene = SyntheticScene {
                id: id.clone(),
                object,
                distractor: Some(distractor),
                modes: vec![
                    AmbiguityMode {
                        bbox: obj_box,
                        weight: 1.0 - share,
                    },
                    AmbiguityMode {
                        bbox: union_box,
                        weight: share,
                    },
                ],
            };
            (scene, boxes, share)
        } else {
            let scene = SyntheticScene {
                id: id.clone(),
                object,
                distractor: None,
                modes: vec![AmbiguityMode {
                    bbox: obj_box,
                    weight: 1.0,
                }],
            };
            (scene, vec![noisy(&obj_box, cfg.annotator_noise, &mut noise_rng)], 0.0)
        };
        scene.validate()?;
        let embedding = scene_embedding(&scene, share, cfg.embedding_dim)?;
        out.push(SynthScene {
            scene,
            split: splits[i],
            ambiguous: ambiguous[i],
            boxes,
            embedding,
        });
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.jsonl` plus per-scene `scenes/*.json`, `embeddings/*.pdt`
/// and ground-truth `masks/*.pdt` under `out`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let scenes = synth_scenes(cfg)?;
    for sub in ["scenes", "embeddings", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    let mut summary = SynthSummary {
        manifest: out.join("manifest.jsonl"),
        scenes: scenes.len(),
        ambiguous: 0,
        records: 0,
        train: 0,
        val: 0,
        test: 0,
    };
    for s in &scenes {
        let id = &s.scene.id;
        let emb = format!("embeddings/{id}.pdt");
        let mask = format!("masks/{id}.pdt");
        let emb32: Vec<f32> = s.embedding.iter().map(|&v| v as f32).collect();
        write_pdt1(&out.join(&emb), &[emb32.len()], &emb32)?;
        let gt = s.scene.object_mask(cfg.resolution);
        let gt32: Vec<f32> = gt.probs().iter().map(|&v| v as f32).collect();
        write_pdt1(&out.join(&mask), &[gt.height(), gt.width()], &gt32)?;
        let mut scene_json = serde_json::to_vec_pretty(&s.scene)?;
        scene_json.push(b'\n');
        write_file(&out.join(format!("scenes/{id}.json")), &scene_json)?;
        for b in &s.boxes {
            let rec = ManifestRecord {
                id: id.clone(),
                split: s.split.name().to_string(),
                embedding: emb.clone(),
                b: *b,
                mask: Some(mask.clone()),
                image: Some(format!("scenes/{id}.json")),
                scene: Some(s.scene.clone()),
            };
            manifest.push_str(&serde_json::to_string(&rec)?);
            manifest.push('\n');
        }
        summary.ambiguous += usize::from(s.ambiguous);
        summary.records += s.boxes.len();
        match s.split {
            Split::Train => summary.train += 1,
            Split::Val => summary.val += 1,
            Split::Test => summary.test += 1,
        }
    }
    write_file(&summary.manifest, manifest.as_bytes())?;
    Ok(summary)
}
