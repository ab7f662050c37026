//! Expected-discrepancy curves `ĝ(δ)` and grid-based oracle stability margins.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::prompts::{perturb, PerturbationKind, PerturbationSpec, PromptBox};
use crate::segmenters::{dice, mean_abs_difference, ImageRef, Segmenter, SoftMask, DEFAULT_THRESHOLD};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_GRID: [f64; 3] = [0.005, 0.01, 0.05];
pub const DEFAULT_SAMPLES_PER_LEVEL: usize = 32;

/// Mask discrepancy used inside `ĝ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    /// `1 - Dice` of masks binarized at 0.5.
    #[default]
    Dice,
    /// Mean absolute difference of soft probabilities.
    MeanAbs,
}

impl std::str::FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Discrepancy::Dice),
            "mean_abs" => Ok(Discrepancy::MeanAbs),
            other => Err(Error::InvalidArgument(format!(
                "unknown discrepancy '{other}' (expected dice or mean_abs)"
            ))),
        }
    }
}

impl Discrepancy {
    pub fn eval(&self, a: &SoftMask, b: &SoftMask) -> Result<f64> {
        match self {
            Discrepancy::Dice => Ok(1.0 - dice(a, b, DEFAULT_THRESHOLD)?),
            Discrepancy::MeanAbs => mean_abs_difference(a, b),
        }
    }
}

/// `d = 1 - dice(a, b, 0.5)`.
pub fn discrepancy(a: &SoftMask, b: &SoftMask) -> Result<f64> {
    Discrepancy::Dice.eval(a, b)
}

fn mean_discrepancy(
    seg: &dyn Segmenter,
    image: &ImageRef,
    reference: &SoftMask,
    boxes: &[PromptBox],
    kind: Discrepancy,
) -> Result<f64> {
    let masks = seg.segment_batch(image, boxes)?;
    if masks.len() != boxes.len() {
        return Err(Error::Segmenter {
            index: masks.len(),
            message: format!("expected {} masks, got {}", boxes.len(), masks.len()),
        });
    }
    let mut total = 0.0;
    for (i, m) in masks.iter().enumerate() {
        total += kind.eval(reference, m).map_err(|e| Error::Segmenter {
            index: i,
            message: e.to_string(),
        })?;
    }
    Ok(total / boxes.len() as f64)
}

/// Monte-Carlo `ĝ(I, b, δ)` over `n` perturbations of one kind.
pub fn estimate_g(
    seg: &dyn Segmenter,
    image: &ImageRef,
    b: &PromptBox,
    spec: &PerturbationSpec,
    n: usize,
    rng: &mut Rng,
    kind: Discrepancy,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("estimate_g needs n >= 1".into()));
    }
    let reference = seg.segment(image, b)?;
    let boxes: Vec<PromptBox> = (0..n).map(|_| perturb(b, spec, rng)).collect();
    mean_discrepancy(seg, image, &reference, &boxes, kind)
}

/// Oracle margin: a grid amplitude, or beyond the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginValue {
    Reached(f64),
    NotReached,
}

const NOT_REACHED: &str = "NOT_REACHED";

impl MarginValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MarginValue::Reached(v) => Some(*v),
            MarginValue::NotReached => None,
        }
    }

    pub fn is_reached(&self) -> bool {
        matches!(self, MarginValue::Reached(_))
    }
}

impl Serialize for MarginValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MarginValue::Reached(v) => s.serialize_f64(*v),
            MarginValue::NotReached => s.serialize_str(NOT_REACHED),
        }
    }
}

impl<'de> Deserialize<'de> for MarginValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MarginValue::Reached(v)),
            Raw::Tag(t) if t == NOT_REACHED => Ok(MarginValue::NotReached),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown margin tag '{t}'"))),
        }
    }
}

/// One level of a discrepancy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GPoint {
    pub delta: f64,
    pub g: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub grid: Vec<f64>,
    pub samples_per_level: usize,
    pub kinds: Vec<PerturbationKind>,
    pub discrepancy: Discrepancy,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID.to_vec(),
            samples_per_level: DEFAULT_SAMPLES_PER_LEVEL,
            kinds: PerturbationKind::ALL.to_vec(),
            discrepancy: Discrepancy::Dice,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("oracle grid is empty".into()));
        }
        if self.grid.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "oracle grid must be non-negative: {:?}",
                self.grid
            )));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "oracle grid must be strictly ascending: {:?}",
                self.grid
            )));
        }
        if self.samples_per_level == 0 {
            return Err(Error::InvalidArgument("samples per level must be >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one perturbation kind is required".into(),
            ));
        }
        Ok(())
    }

    pub fn max_delta(&self) -> f64 {
        self.grid.last().copied().unwrap_or(0.0)
    }
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tolerance must lie in (0, 1), got {tau}"
        )))
    }
}

/// Pooled `ĝ` at every grid level: `samples_per_level` draws per kind,
/// averaged into one value. Each (level, kind) uses its own substream.
pub fn g_curve(
    seg: &dyn Segmenter,
    image: &ImageRef,
    b: &PromptBox,
    cfg: &OracleConfig,
    rng: &Rng,
) -> Result<Vec<GPoint>> {
    cfg.validate()?;
    let reference = seg.segment(image, b)?;
    let mut curve = Vec::with_capacity(cfg.grid.len());
    for (li, &delta) in cfg.grid.iter().enumerate() {
        let mut boxes = Vec::with_capacity(cfg.samples_per_level * cfg.kinds.len());
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let spec = PerturbationSpec::new(kind, delta)?;
            let mut r = rng.substream((li * cfg.kinds.len() + ki) as u64);
            boxes.extend((0..cfg.samples_per_level).map(|_| perturb(b, &spec, &mut r)));
        }
        let g = mean_discrepancy(seg, image, &reference, &boxes, cfg.discrepancy)?;
        curve.push(GPoint {
            delta,
            g,
            samples: boxes.len(),
        });
    }
    Ok(curve)
}

/// Smallest grid amplitude whose `ĝ` reaches `tau`.
pub fn margin_from_curve(curve: &[GPoint], tau: f64) -> MarginValue {
    curve
        .iter()
        .find(|p| p.g >= tau)
        .map_or(MarginValue::NotReached, |p| MarginValue::Reached(p.delta))
}

pub fn oracle_margin(
    seg: &dyn Segmenter,
    image: &ImageRef,
    b: &PromptBox,
    tau: f64,
    cfg: &OracleConfig,
    rng: &Rng,
) -> Result<(MarginValue, Vec<GPoint>)> {
    validate_tau(tau)?;
    let curve = g_curve(seg, image, b, cfg, rng)?;
    Ok((margin_from_curve(&curve, tau), curve))
}

/// Oracle stability margin for one query, with the curve it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    #[serde(rename = "box")]
    pub b: PromptBox,
    pub tau: f64,
    pub delta_star: MarginValue,
    pub g: Vec<GPoint>,
}

impl MarginRecord {
    /// Regression target: NOT_REACHED is censored at the largest grid level.
    pub fn target(&self) -> f64 {
        self.delta_star
            .value()
            .unwrap_or_else(|| self.g.last().map_or(0.0, |p| p.delta))
    }

    pub fn censored(&self) -> bool {
        !self.delta_star.is_reached()
    }

    /// Re-checks that `δ*` is consistent with the stored curve.
    pub fn check(&self) -> Result<()> {
        if self.g.windows(2).any(|w| w[1].delta <= w[0].delta) || self.g.iter().any(|p| p.samples == 0) {
            return Err(Error::InvalidArgument(format!(
                "record '{}': malformed g curve",
                self.id
            )));
        }
        if margin_from_curve(&self.g, self.tau) != self.delta_star {
            return Err(Error::InvalidArgument(format!(
                "record '{}': delta* disagrees with its g curve",
                self.id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenters::{Ellipse, SyntheticScene, SyntheticSegmenter};

    pub(crate) fn scene(id: &str, center: [f64; 2], radii: [f64; 2], softness: f64) -> ImageRef {
        ImageRef::from_scene(SyntheticScene {
            id: id.into(),
            object: Ellipse {
                center,
                radii,
                softness,
            },
            distractor: None,
            modes: Vec::new(),
        })
    }

    fn tight(img: &ImageRef) -> PromptBox {
        let e = img.scene.as_ref().unwrap().object.extent();
        PromptBox::new(e[0], e[1], e[2], e[3]).unwrap()
    }

    #[test]
    fn discrepancy_examples() {
        let a = SoftMask::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = SoftMask::new(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let c = SoftMask::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(discrepancy(&a, &a).unwrap(), 0.0);
        assert_eq!(discrepancy(&a, &c).unwrap(), 1.0);
        assert!((discrepancy(&a, &b).unwrap() - 0.2).abs() < 1e-15);
        assert!(discrepancy(&a, &SoftMask::filled(3, 2, 0.0)).is_err());
    }

    #[test]
    fn zero_amplitude_gives_zero_g() {
        let seg = SyntheticSegmenter::default();
        let img = scene("a", [0.5, 0.5], [0.12, 0.1], 0.03);
        let b = tight(&img);
        for kind in PerturbationKind::ALL {
            let spec = PerturbationSpec::new(kind, 0.0).unwrap();
            let g = estimate_g(&seg, &img, &b, &spec, 16, &mut Rng::new(1), Discrepancy::Dice).unwrap();
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn estimate_g_replays() {
        let seg = SyntheticSegmenter::default();
        let img = scene("a", [0.45, 0.55], [0.1, 0.14], 0.02);
        let b = tight(&img);
        let spec = PerturbationSpec::new(PerturbationKind::Translation, 0.02).unwrap();
        let a = estimate_g(&seg, &img, &b, &spec, 32, &mut Rng::new(9), Discrepancy::Dice).unwrap();
        let c = estimate_g(&seg, &img, &b, &spec, 32, &mut Rng::new(9), Discrepancy::Dice).unwrap();
        assert_eq!(a.to_bits(), c.to_bits());
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn g_grows_with_amplitude() {
        let seg = SyntheticSegmenter::default();
        let mut gen = Rng::new(77);
        let mut violations = 0;
        for s in 0..50 {
            let img = scene(
                &format!("s{s}"),
                [gen.uniform_in(0.35, 0.65), gen.uniform_in(0.35, 0.65)],
                [gen.uniform_in(0.08, 0.16), gen.uniform_in(0.08, 0.16)],
                gen.uniform_in(0.005, 0.06),
            );
            let b = tight(&img);
            let mut gs = Vec::new();
            for delta in [0.005, 0.05] {
                let spec = PerturbationSpec::new(PerturbationKind::Translation, delta).unwrap();
                gs.push(estimate_g(&seg, &img, &b, &spec, 128, &mut Rng::new(s), Discrepancy::Dice).unwrap());
            }
            if gs[1] < gs[0] {
                violations += 1;
            }
        }
        assert!(violations <= 2, "{violations}");
    }

    #[test]
    fn margin_from_curve_examples() {
        let curve: Vec<GPoint> = [(0.005, 0.05), (0.01, 0.12), (0.05, 0.30)]
            .iter()
            .map(|&(delta, g)| GPoint { delta, g, samples: 64 })
            .collect();
        assert_eq!(margin_from_curve(&curve, 0.1), MarginValue::Reached(0.01));
        assert_eq!(margin_from_curve(&curve, 0.5), MarginValue::NotReached);
    }

    #[test]
    fn sharp_scenes_have_larger_margins() {
        let seg = SyntheticSegmenter::default();
        let cfg = OracleConfig::default();
        let mut gen = Rng::new(5);
        let mut ordered = 0;
        for s in 0..20 {
            let center = [gen.uniform_in(0.35, 0.65), gen.uniform_in(0.35, 0.65)];
            let radii = [gen.uniform_in(0.08, 0.16), gen.uniform_in(0.08, 0.16)];
            let sharp = scene("sharp", center, radii, 0.002);
            let soft = scene("soft", center, radii, 0.05);
            let rng = Rng::new(100 + s);
            let (ms, _) = oracle_margin(&seg, &sharp, &tight(&sharp), 0.1, &cfg, &rng).unwrap();
            let (mf, _) = oracle_margin(&seg, &soft, &tight(&soft), 0.1, &cfg, &rng).unwrap();
            let v = |m: MarginValue| m.value().unwrap_or(f64::INFINITY);
            if v(ms) >= v(mf) {
                ordered += 1;
            }
        }
        assert!(ordered >= 18, "{ordered}/20");
    }

    #[test]
    fn oracle_semantics_hold() {
        let seg = SyntheticSegmenter::default();
        let cfg = OracleConfig::default();
        for (i, s) in [0.002, 0.01, 0.03, 0.08].iter().enumerate() {
            let img = scene("x", [0.5, 0.48], [0.11, 0.13], *s);
            let (m, g) = oracle_margin(&seg, &img, &tight(&img), 0.1, &cfg, &Rng::new(i as u64)).unwrap();
            let rec = MarginRecord {
                id: "x".into(),
                embedding: vec![],
                b: tight(&img),
                tau: 0.1,
                delta_star: m,
                g: g.clone(),
            };
            rec.check().unwrap();
            if let MarginValue::Reached(d) = m {
                assert!(cfg.grid.contains(&d));
                assert!(g.iter().filter(|p| p.delta < d).all(|p| p.g < 0.1));
                assert!(g.iter().find(|p| p.delta == d).unwrap().g >= 0.1);
            }
            assert!(g.iter().all(|p| p.samples == 64));
        }
    }

    #[test]
    fn invalid_inputs() {
        let seg = SyntheticSegmenter::default();
        let img = scene("x", [0.5, 0.5], [0.1, 0.1], 0.01);
        let b = tight(&img);
        let rng = Rng::new(0);
        assert!(oracle_margin(&seg, &img, &b, 1.0, &OracleConfig::default(), &rng).is_err());
        let bad = OracleConfig {
            grid: vec![0.05, 0.01],
            ..OracleConfig::default()
        };
        assert!(oracle_margin(&seg, &img, &b, 0.1, &bad, &rng).is_err());
    }

    #[test]
    fn margin_value_round_trips_through_json() {
        for m in [MarginValue::Reached(0.01), MarginValue::NotReached] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<MarginValue>(&s).unwrap(), m);
        }
        assert_eq!(
            serde_json::to_string(&MarginValue::NotReached).unwrap(),
            "\"NOT_REACHED\""
        );
        assert!(serde_json::from_str::<MarginValue>("\"LATER\"").is_err());
    }
}
