//! Bounding-box prompts in normalized image coordinates, their unconstrained
//! `(logit xc, logit yc, log H, log W)` representation, and the
//! translation/scale perturbation model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logit, sigmoid, Rng};

/// Distance kept from the image border when a box is clamped.
pub const CLAMP_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PromptBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PromptBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && 0.0 < self.x1
            && self.x1 < self.x2
            && self.x2 < 1.0
            && 0.0 < self.y1
            && self.y1 < self.y2
            && self.y2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) is not inside the open unit square with positive extent",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Builds a box from center and size, clamping into the unit square.
    /// Returns the box and whether clamping changed it.
    pub fn from_center_size(xc: f64, yc: f64, h: f64, w: f64) -> (Self, bool) {
        clamp_corners(xc - w / 2.0, yc - h / 2.0, xc + w / 2.0, yc + h / 2.0)
    }
}

impl TryFrom<[f64; 4]> for PromptBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        PromptBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PromptBox> for [f64; 4] {
    fn from(b: PromptBox) -> Self {
        b.to_array()
    }
}

fn clamp_axis(lo: f64, hi: f64) -> (f64, f64, bool) {
    let min = CLAMP_MARGIN;
    let max = 1.0 - CLAMP_MARGIN;
    let mut a = lo.clamp(min, max);
    let mut b = hi.clamp(min, max);
    if b - a < CLAMP_MARGIN {
        if b + CLAMP_MARGIN <= max {
            b = a + CLAMP_MARGIN;
        } else {
            a = b - CLAMP_MARGIN;
        }
    }
    let clamped = a != lo || b != hi;
    (a, b, clamped)
}

fn clamp_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> (PromptBox, bool) {
    let (x1c, x2c, cx) = clamp_axis(x1, x2);
    let (y1c, y2c, cy) = clamp_axis(y1, y2);
    (
        PromptBox {
            x1: x1c,
            y1: y1c,
            x2: x2c,
            y2: y2c,
        },
        cx || cy,
    )
}

/// `u = (logit xc, logit yc, log H, log W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReparamPrompt(pub [f64; 4]);

impl ReparamPrompt {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn box_to_reparam(b: &PromptBox) -> Result<ReparamPrompt> {
    let (h, w) = (b.height(), b.width());
    if !(h > 0.0 && w > 0.0) {
        return Err(Error::InvalidBox(format!(
            "degenerate box with height {h} and width {w}"
        )));
    }
    b.validate()?;
    let (xc, yc) = b.center();
    Ok(ReparamPrompt([logit(xc), logit(yc), h.ln(), w.ln()]))
}

/// Inverse of [`box_to_reparam`]; boxes spilling outside the image are
/// clamped and flagged.
pub fn reparam_to_box(u: &ReparamPrompt) -> Result<(PromptBox, bool)> {
    if u.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("reparameterized prompt {:?}", u.0)));
    }
    let xc = sigmoid(u.0[0]);
    let yc = sigmoid(u.0[1]);
    let h = u.0[2].exp();
    let w = u.0[3].exp();
    Ok(PromptBox::from_center_size(xc, yc, h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Translation,
    Scale,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 2] = [PerturbationKind::Translation, PerturbationKind::Scale];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::Translation => "translation",
            PerturbationKind::Scale => "scale",
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(PerturbationKind::Translation),
            "scale" => Ok(PerturbationKind::Scale),
            other => Err(Error::InvalidArgument(format!("unknown perturbation kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub amplitude: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, amplitude: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "perturbation amplitude must be >= 0, got {amplitude}"
            )));
        }
        Ok(Self { kind, amplitude })
    }

    /// Two independent offsets drawn from `Uniform(-δ, δ)`.
    pub fn draw(&self, rng: &mut Rng) -> [f64; 2] {
        let d = self.amplitude;
        [rng.uniform_in(-d, d), rng.uniform_in(-d, d)]
    }
}

/// Applies explicit offsets: `(εx, εy)` shift the center for translation,
/// `(εh, εw)` scale the size by `exp(ε)` for scale.
pub fn perturb_with(b: &PromptBox, kind: PerturbationKind, eps: [f64; 2]) -> PromptBox {
    if eps == [0.0, 0.0] {
        return *b;
    }
    let (xc, yc) = b.center();
    let (h, w) = (b.height(), b.width());
    let (out, _) = match kind {
        PerturbationKind::Translation => PromptBox::from_center_size(xc + eps[0], yc + eps[1], h, w),
        PerturbationKind::Scale => PromptBox::from_center_size(xc, yc, h * eps[0].exp(), w * eps[1].exp()),
    };
    out
}

/// Draws `Δ ~ Q_δ(· | b)` and returns the clamped perturbed box.
pub fn perturb(b: &PromptBox, spec: &PerturbationSpec, rng: &mut Rng) -> PromptBox {
    if spec.amplitude == 0.0 {
        return *b;
    }
    let eps = spec.draw(rng);
    perturb_with(b, spec.kind, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn centered_box_reparam() {
        let u = box_to_reparam(&PromptBox::new(0.25, 0.25, 0.75, 0.75).unwrap()).unwrap();
        assert!(close(u.0[0], 0.0, 1e-15) && close(u.0[1], 0.0, 1e-15));
        assert!(close(u.0[2], -std::f64::consts::LN_2, 1e-12));
        assert!(close(u.0[3], -std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn offcenter_box_reparam() {
        let u = box_to_reparam(&PromptBox::new(0.1, 0.2, 0.3, 0.6).unwrap()).unwrap();
        // logit(0.2) = ln(0.25), logit(0.4) = ln(2/3), log 0.4, log 0.2
        let expected = [
            -1.386_294_361_119_890_6,
            -0.405_465_108_108_164_4,
            -0.916_290_731_874_155,
            -1.609_437_912_434_100_3,
        ];
        for (a, e) in u.0.iter().zip(expected) {
            assert!(close(*a, e, 1e-12), "{a} vs {e}");
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let b = PromptBox {
            x1: 0.3,
            y1: 0.2,
            x2: 0.3,
            y2: 0.5,
        };
        assert!(box_to_reparam(&b).is_err());
        assert!(PromptBox::new(0.0, 0.1, 0.5, 0.5).is_err());
    }

    #[test]
    fn inverse_of_centered_box() {
        let l = 0.5f64.ln();
        let (b, clamped) = reparam_to_box(&ReparamPrompt([0.0, 0.0, l, l])).unwrap();
        assert!(!clamped);
        for (a, e) in b.to_array().iter().zip([0.25, 0.25, 0.75, 0.75]) {
            assert!(close(*a, e, 1e-15));
        }
    }

    #[test]
    fn oversized_box_is_clamped_and_flagged() {
        let (b, clamped) = reparam_to_box(&ReparamPrompt([0.0, 0.0, 2f64.ln(), 0.5f64.ln()])).unwrap();
        assert!(clamped);
        b.validate().unwrap();
        assert!(close(b.y1, CLAMP_MARGIN, 0.0) && close(b.y2, 1.0 - CLAMP_MARGIN, 0.0));
    }

    #[test]
    fn non_finite_reparam_is_rejected() {
        assert!(reparam_to_box(&ReparamPrompt([f64::NAN, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let b = PromptBox::new(0.11, 0.27, 0.53, 0.84).unwrap();
        let mut rng = Rng::new(5);
        for kind in PerturbationKind::ALL {
            let spec = PerturbationSpec::new(kind, 0.0).unwrap();
            assert_eq!(perturb(&b, &spec, &mut rng), b);
        }
    }

    #[test]
    fn translation_bound_and_size_preserved() {
        let b = PromptBox::new(0.3, 0.3, 0.7, 0.7).unwrap();
        let spec = PerturbationSpec::new(PerturbationKind::Translation, 0.01).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let p = perturb(&b, &spec, &mut rng);
            let (cx, cy) = p.center();
            assert!((cx - 0.5).abs() <= 0.01 + 1e-15 && (cy - 0.5).abs() <= 0.01 + 1e-15);
            assert!(close(p.width(), b.width(), 1e-12) && close(p.height(), b.height(), 1e-12));
        }
    }

    #[test]
    fn scale_log_ratio_is_centered() {
        let b = PromptBox::new(0.3, 0.3, 0.6, 0.7).unwrap();
        let spec = PerturbationSpec::new(PerturbationKind::Scale, 0.05).unwrap();
        let mut rng = Rng::new(3);
        let n = 100_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| (perturb(&b, &spec, &mut rng).height() / b.height()).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        // Uniform(-δ, δ) has standard deviation δ/√3.
        let se = 0.05 / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn antithetic_offsets_mirror() {
        let b = PromptBox::new(0.2, 0.3, 0.5, 0.6).unwrap();
        let (cx, cy) = b.center();
        let plus = perturb_with(&b, PerturbationKind::Translation, [0.013, -0.007]);
        let minus = perturb_with(&b, PerturbationKind::Translation, [-0.013, 0.007]);
        let (px, py) = plus.center();
        let (mx, my) = minus.center();
        assert!(close(px - cx, cx - mx, 1e-12) && close(py - cy, cy - my, 1e-12));
        let plus = perturb_with(&b, PerturbationKind::Scale, [0.02, 0.04]);
        let minus = perturb_with(&b, PerturbationKind::Scale, [-0.02, -0.04]);
        assert!(close(
            (plus.height() / b.height()).ln(),
            -(minus.height() / b.height()).ln(),
            1e-12
        ));
    }

    fn arb_box() -> impl Strategy<Value = PromptBox> {
        (0.01f64..0.98, 0.01f64..0.98, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(x, y, fw, fh)| {
            let x2 = x + (0.99 - x) * fw;
            let y2 = y + (0.99 - y) * fh;
            PromptBox::new(x, y, x2.max(x + 1e-4), y2.max(y + 1e-4)).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn box_reparam_round_trip(b in arb_box()) {
            let (back, clamped) = reparam_to_box(&box_to_reparam(&b).unwrap()).unwrap();
            prop_assert!(!clamped);
            for (a, e) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((a - e).abs() <= 1e-12);
            }
        }

        #[test]
        fn reparam_round_trip_near_origin(u in proptest::array::uniform4(-0.5f64..0.5)) {
            let mut u = u;
            u[2] -= 1.5;
            u[3] -= 1.5;
            let (b, clamped) = reparam_to_box(&ReparamPrompt(u)).unwrap();
            prop_assert!(!clamped);
            let back = box_to_reparam(&b).unwrap();
            for (a, e) in back.0.iter().zip(u) {
                prop_assert!((a - e).abs() <= 1e-12);
            }
        }

        #[test]
        fn perturbation_keeps_boxes_valid(b in arb_box(), delta in 0.0f64..0.5, seed in any::<u64>(), scale in any::<bool>()) {
            let kind = if scale { PerturbationKind::Scale } else { PerturbationKind::Translation };
            let spec = PerturbationSpec::new(kind, delta).unwrap();
            let mut rng = Rng::new(seed);
            let p = perturb(&b, &spec, &mut rng);
            prop_assert!(p.validate().is_ok());
        }
    }
}
