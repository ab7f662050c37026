//! Prompt-sampling strategies, per-pixel entropy of decoded mask ensembles,
//! and the quality metrics of the resulting uncertainty maps.

pub mod metrics;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{auroc, bernoulli_nll, map_metrics, MapMetrics};

use crate::ambiguity::{mdn_forward, sample_prompts, MdnModel, MixtureParams};
use crate::error::{Error, Result};
use crate::io::tensor::write_pdt1_f64;
use crate::numerics::Rng;
use crate::prompts::{perturb, PerturbationKind, PerturbationSpec, PromptBox};
use crate::segmenters::{ImageRef, Segmenter, SoftMask, DEFAULT_THRESHOLD};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 1000;
const SEGMENT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Jitter,
    D0,
    CondMdn,
}

impl StrategyKind {
    pub fn tag(&self) -> &'static str {
        match self {
            StrategyKind::Jitter => "jitter",
            StrategyKind::D0 => "d0",
            StrategyKind::CondMdn => "cond_mdn",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jitter" => Ok(StrategyKind::Jitter),
            "d0" => Ok(StrategyKind::D0),
            "cond_mdn" | "cond" => Ok(StrategyKind::CondMdn),
            other => Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Inputs a strategy may need; each kind checks for its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct StrategyParams<'a> {
    pub b0: Option<PromptBox>,
    pub jitter_delta: Option<f64>,
    pub d0: Option<&'a MixtureParams>,
    pub mdn: Option<&'a MdnModel>,
    pub embedding: Option<&'a [f64]>,
}

/// A law over prompt boxes.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSampler {
    /// Translation then scale perturbation of `b0`, both at amplitude `delta`.
    Jitter { b0: PromptBox, delta: f64 },
    /// Ancestral sampling from a mixture over u (D0 or the conditional MDN).
    Mixture { kind: StrategyKind, mix: MixtureParams },
}

impl PromptSampler {
    pub fn kind(&self) -> StrategyKind {
        match self {
            PromptSampler::Jitter { .. } => StrategyKind::Jitter,
            PromptSampler::Mixture { kind, .. } => *kind,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<PromptBox>> {
        match self {
            PromptSampler::Jitter { b0, delta } => {
                let t = PerturbationSpec::new(PerturbationKind::Translation, *delta)?;
                let s = PerturbationSpec::new(PerturbationKind::Scale, *delta)?;
                Ok((0..n).map(|_| perturb(&perturb(b0, &t, rng), &s, rng)).collect())
            }
            PromptSampler::Mixture { mix, .. } => sample_prompts(mix, n, rng),
        }
    }
}

pub fn make_strategy(kind: StrategyKind, params: &StrategyParams) -> Result<PromptSampler> {
    let missing = |what: &str| Error::InvalidArgument(format!("strategy '{}' needs {what}", kind.tag()));
    match kind {
        StrategyKind::Jitter => {
            let b0 = params.b0.ok_or_else(|| missing("a reference box"))?;
            let delta = params.jitter_delta.ok_or_else(|| missing("a jitter amplitude"))?;
            PerturbationSpec::new(PerturbationKind::Translation, delta)?;
            Ok(PromptSampler::Jitter { b0, delta })
        }
        StrategyKind::D0 => {
            let mix = params.d0.ok_or_else(|| missing("an unconditional mixture"))?;
            mix.validate()?;
            Ok(PromptSampler::Mixture { kind, mix: mix.clone() })
        }
        StrategyKind::CondMdn => {
            let mdn = params.mdn.ok_or_else(|| missing("an MDN"))?;
            let x = params.embedding.ok_or_else(|| missing("an image embedding"))?;
            Ok(PromptSampler::Mixture {
                kind,
                mix: mdn_forward(mdn, x)?,
            })
        }
    }
}

/// How per-pixel ensemble probabilities are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Fraction of members whose binarized mask is foreground.
    #[default]
    Vote,
    /// Mean of the soft probabilities.
    SoftMean,
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vote" => Ok(EntropyMode::Vote),
            "soft_mean" | "soft" => Ok(EntropyMode::SoftMean),
            other => Err(Error::InvalidArgument(format!(
                "unknown entropy mode '{other}' (expected vote or soft_mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    /// Binary entropy in bits.
    pub values: Vec<f64>,
    pub strategy: StrategyKind,
    pub ensemble_size: usize,
}

/// `-p log2 p - (1-p) log2 (1-p)` with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    (term(p) + term(1.0 - p)).clamp(0.0, 1.0)
}

/// Accumulates ensemble members into per-pixel probabilities.
#[derive(Debug, Clone)]
struct Accumulator {
    shape: (usize, usize),
    sums: Vec<f64>,
    count: usize,
    mode: EntropyMode,
}

impl Accumulator {
    fn new(shape: (usize, usize), mode: EntropyMode) -> Self {
        Self {
            shape,
            sums: vec![0.0; shape.0 * shape.1],
            count: 0,
            mode,
        }
    }

    fn add(&mut self, m: &SoftMask, index: usize) -> Result<()> {
        if m.shape() != self.shape {
            return Err(Error::Segmenter {
                index,
                message: format!("mask shape {:?} differs from {:?}", m.shape(), self.shape),
            });
        }
        for (s, &p) in self.sums.iter_mut().zip(m.probs()) {
            *s += match self.mode {
                EntropyMode::Vote => f64::from(u8::from(p > DEFAULT_THRESHOLD)),
                EntropyMode::SoftMean => p,
            };
        }
        self.count += 1;
        Ok(())
    }

    fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sums.iter().map(|s| s / n).collect()
    }
}

/// Entropy map and ensemble-mean probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMaps {
    pub entropy: EntropyMap,
    pub mean_prob: Vec<f64>,
}

/// Maps from an explicit ensemble of masks.
pub fn entropy_from_masks(masks: &[SoftMask], strategy: StrategyKind, mode: EntropyMode) -> Result<EnsembleMaps> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask ensemble".into()))?;
    let mut acc = Accumulator::new(first.shape(), mode);
    for (i, m) in masks.iter().enumerate() {
        acc.add(m, i)?;
    }
    Ok(finish(acc, strategy))
}

fn finish(acc: Accumulator, strategy: StrategyKind) -> EnsembleMaps {
    let mean_prob = acc.mean();
    EnsembleMaps {
        entropy: EntropyMap {
            height: acc.shape.0,
            width: acc.shape.1,
            values: mean_prob.iter().map(|&p| binary_entropy(p)).collect(),
            strategy,
            ensemble_size: acc.count,
        },
        mean_prob,
    }
}

/// Decodes `n` sampled prompts and returns the ensemble entropy map.
pub fn entropy_map(
    seg: &dyn Segmenter,
    image: &ImageRef,
    sampler: &PromptSampler,
    n: usize,
    rng: &mut Rng,
    mode: EntropyMode,
) -> Result<EnsembleMaps> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("ensemble size must be >= 2, got {n}")));
    }
    let boxes = sampler.sample(n, rng)?;
    let mut acc = Accumulator::new(seg.resolution(), mode);
    for (c, chunk) in boxes.chunks(SEGMENT_CHUNK).enumerate() {
        let offset = c * SEGMENT_CHUNK;
        let masks = seg.segment_batch(image, chunk).map_err(|e| match e {
            Error::Segmenter { index, message } => Error::Segmenter {
                index: index + offset,
                message,
            },
            other => other,
        })?;
        if masks.len() != chunk.len() {
            return Err(Error::Segmenter {
                index: offset + masks.len(),
                message: format!("expected {} masks, got {}", chunk.len(), masks.len()),
            });
        }
        for (i, m) in masks.iter().enumerate() {
            acc.add(m, offset + i)?;
        }
    }
    Ok(finish(acc, sampler.kind()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub kind: StrategyKind,
    pub metrics: MapMetrics,
    pub maps: EnsembleMaps,
}

/// One metrics row per strategy; each strategy draws from a stream named
/// after its tag, so rows do not depend on which other strategies run.
pub fn compare_strategies(
    seg: &dyn Segmenter,
    image: &ImageRef,
    gt: &[bool],
    strategies: &[PromptSampler],
    n: usize,
    rng: &Rng,
    mode: EntropyMode,
) -> Result<Vec<StrategyResult>> {
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("at least one strategy is required".into()));
    }
    strategies
        .iter()
        .map(|s| {
            let maps = entropy_map(seg, image, s, n, &mut rng.named(s.kind().tag()), mode)?;
            let metrics = map_metrics(&maps.entropy.values, &maps.mean_prob, gt)?;
            Ok(StrategyResult {
                kind: s.kind(),
                metrics,
                maps,
            })
        })
        .collect()
}

/// 8-bit binary PGM with values in `[0, 1]` scaled by 255.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("PGM map", height * width, values.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.pdt` and `<stem>.pgm` next to each other.
pub fn export_map(dir: &Path, stem: &str, height: usize, width: usize, values: &[f64]) -> Result<()> {
    write_pdt1_f64(&dir.join(format!("{stem}.pdt")), &[height, width], values)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), height, width, values)
}
