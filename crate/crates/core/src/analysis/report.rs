//! Dataset-level prompt-dependence report: per-image ambiguity, stability
//! margin and Dice, their pairwise Pearson correlations and the
//! median-quadrant table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::stats::{mean_sem, pearson, pearson_permutation, quadrant_classes, Correlation, MeanSem, QuadrantTable};
use crate::ambiguity::{ambiguity_score, mdn_forward, mixture_moments, MdnModel};
use crate::error::{Error, Result};
use crate::io::checkpoint::{file_sha256, load_margin, load_mdn};
use crate::io::manifest::{load_manifest, load_mask, DatasetManifest, EmbeddingCache, ImageGroup, Split};
use crate::numerics::Rng;
use crate::prompts::{reparam_to_box, PromptBox, ReparamPrompt};
use crate::segmenters::{dice, Segmenter, DEFAULT_THRESHOLD};
use crate::stability::{
    build_margin_dataset, margin_predict, representative_prompt, MarginItem, MarginModel, MarginValue, OracleConfig,
    PromptChoice, DEFAULT_TAU,
};

/// Embeds every image of `split` for the per-image stages.
pub fn margin_items<'a>(
    groups: impl Iterator<Item = &'a ImageGroup>,
    cache: &mut EmbeddingCache,
) -> Result<Vec<MarginItem>> {
    groups
        .map(|g| {
            Ok(MarginItem {
                image: g.image.clone(),
                embedding: cache.get(&g.embedding)?.to_vec(),
                boxes: g.boxes.clone(),
            })
        })
        .collect()
}

/// Which prompt a Dice score is measured at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceSource {
    /// Average over the image's annotated boxes.
    #[default]
    GtBoxes,
    /// The box at the MDN mixture mean in u-space.
    MdnMean,
}

impl std::str::FromStr for DiceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_boxes" | "gt" => Ok(DiceSource::GtBoxes),
            "mdn_mean" | "mdn" => Ok(DiceSource::MdnMean),
            other => Err(Error::InvalidArgument(format!(
                "unknown dice source '{other}' (expected gt_boxes or mdn_mean)"
            ))),
        }
    }
}

/// Box at the mixture mean of the MDN's prediction for `x`.
pub fn mdn_mean_box(mdn: &MdnModel, x: &[f64]) -> Result<PromptBox> {
    let (mean, _) = mixture_moments(&mdn_forward(mdn, x)?);
    Ok(reparam_to_box(&ReparamPrompt(mean))?.0)
}

/// Per-image Dice against the ground-truth mask; `None` when the image has
/// no mask. Boxes from `MdnMean` need the MDN.
pub fn dice_scores(
    seg: &dyn Segmenter,
    groups: &[&ImageGroup],
    source: DiceSource,
    mdn: Option<&MdnModel>,
    cache: &mut EmbeddingCache,
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let Some(mask_path) = &g.mask else {
            warn!("image '{}' has no ground-truth mask; skipping Dice", g.id);
            out.push(None);
            continue;
        };
        let gt = load_mask(mask_path)?;
        let boxes = match source {
            DiceSource::GtBoxes => g.boxes.clone(),
            DiceSource::MdnMean => {
                let mdn = mdn.ok_or_else(|| Error::InvalidArgument("Dice at the MDN mean needs an MDN".into()))?;
                vec![mdn_mean_box(mdn, cache.get(&g.embedding)?)?]
            }
        };
        let masks = seg.segment_batch(&g.image, &boxes)?;
        let mut sum = 0.0;
        for m in &masks {
            sum += dice(m, &gt, DEFAULT_THRESHOLD)?;
        }
        out.push(Some(sum / masks.len() as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub split: Split,
    pub tau: f64,
    pub seed: u64,
    pub prompt: PromptChoice,
    pub dice_source: DiceSource,
    /// Also run the oracle at each representative prompt.
    pub oracle: Option<OracleConfig>,
    /// Permutation p-values with this many resamples instead of Student t.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            tau: DEFAULT_TAU,
            seed: 0,
            prompt: PromptChoice::MixtureMode,
            dice_source: DiceSource::GtBoxes,
            oracle: None,
            permutations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub u_amb: f64,
    pub delta_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_oracle: Option<MarginValue>,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub x: String,
    pub y: String,
    /// `None` when either variable is constant.
    pub result: Option<Correlation>,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub images: usize,
    pub dice: Option<MeanSem>,
    pub u_amb_range: [f64; 2],
    pub delta_hat_range: [f64; 2],
    pub correlations: Vec<CorrelationRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_censored_fraction: Option<f64>,
    pub quadrants: Option<QuadrantTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub manifest: String,
    pub manifest_sha256: String,
    pub mdn_sha256: String,
    pub margin_sha256: String,
    pub segmenter: String,
    pub config: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: Vec<ReportRow>,
    pub summary: ReportSummary,
    pub config: ConfigEcho,
}

fn range(v: &[f64]) -> [f64; 2] {
    v.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], &x| {
        [lo.min(x), hi.max(x)]
    })
}

/// How correlation p-values are computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PValueMethod {
    #[default]
    StudentT,
    /// Each pair draws from a stream named after it.
    Permutation { resamples: usize, seed: u64 },
}

fn correlation_row(x: &str, y: &str, a: &[f64], b: &[f64], method: PValueMethod) -> CorrelationRow {
    let computed = match method {
        PValueMethod::StudentT => pearson(a, b),
        PValueMethod::Permutation { resamples, seed } => {
            pearson_permutation(a, b, resamples, &mut Rng::new(seed).named(&format!("{x}~{y}")))
        }
    };
    let result = match computed {
        Ok(c) => Some(c),
        Err(e) => {
            warn!("r({x}, {y}) undefined: {e}");
            None
        }
    };
    CorrelationRow {
        x: x.into(),
        y: y.into(),
        stars: result.as_ref().map(|c| c.stars().to_string()).unwrap_or_default(),
        result,
    }
}

/// Summary statistics over rows; Dice-based entries use the rows that have one.
pub fn summarize(rows: &[ReportRow], method: PValueMethod) -> Result<ReportSummary> {
    let u: Vec<f64> = rows.iter().map(|r| r.u_amb).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.delta_hat).collect();
    let with_dice: Vec<&ReportRow> = rows.iter().filter(|r| r.dice.is_some()).collect();
    let du: Vec<f64> = with_dice.iter().map(|r| r.u_amb).collect();
    let dd: Vec<f64> = with_dice.iter().map(|r| r.delta_hat).collect();
    let dice: Vec<f64> = with_dice.iter().filter_map(|r| r.dice).collect();
    let correlations = vec![
        correlation_row("u_amb", "delta_star", &u, &d, method),
        correlation_row("u_amb", "dice", &du, &dice, method),
        correlation_row("delta_star", "dice", &dd, &dice, method),
    ];
    let oracle: Vec<&MarginValue> = rows.iter().filter_map(|r| r.delta_oracle.as_ref()).collect();
    let oracle_censored_fraction =
        (!oracle.is_empty()).then(|| oracle.iter().filter(|m| !m.is_reached()).count() as f64 / oracle.len() as f64);
    let quadrants = if dice.len() >= 4 {
        Some(quadrant_classes(&du, &dd, &dice)?)
    } else {
        None
    };
    Ok(ReportSummary {
        images: rows.len(),
        dice: if dice.is_empty() { None } else { Some(mean_sem(&dice)?) },
        u_amb_range: range(&u),
        delta_hat_range: range(&d),
        correlations,
        oracle_censored_fraction,
        quadrants,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV of the per-image scatter points.
pub fn rows_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("id,u_amb,delta_hat,delta_oracle,dice\n");
    for r in rows {
        let oracle = match &r.delta_oracle {
            Some(MarginValue::Reached(v)) => format!("{v}"),
            Some(MarginValue::NotReached) => "NOT_REACHED".into(),
            None => String::new(),
        };
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.id,
            r.u_amb,
            r.delta_hat,
            oracle,
            fmt_opt(r.dice)
        );
    }
    s
}

/// Human-readable summary table.
pub fn report_text(report: &AnalysisReport) -> String {
    let s = &report.summary;
    let c = &report.config;
    let mut t = String::new();
    let _ = writeln!(
        t,
        "prompt-dependence report: {} images ({} split)",
        s.images,
        c.config.split.name()
    );
    let _ = writeln!(
        t,
        "manifest  {} ({})",
        c.manifest,
        &c.manifest_sha256[..12.min(c.manifest_sha256.len())]
    );
    let _ = writeln!(
        t,
        "segmenter {}   tau {}   seed {}",
        c.segmenter, c.config.tau, c.config.seed
    );
    match &s.dice {
        Some(d) => {
            let sem = d.sem.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(t, "mean Dice {:.4} (SEM {sem}, n={})", d.mean, d.n);
        }
        None => {
            let _ = writeln!(t, "mean Dice n/a");
        }
    }
    let _ = writeln!(t, "U_amb range      [{:.4}, {:.4}]", s.u_amb_range[0], s.u_amb_range[1]);
    let _ = writeln!(
        t,
        "delta_star range [{:.5}, {:.5}]",
        s.delta_hat_range[0], s.delta_hat_range[1]
    );
    if let Some(f) = s.oracle_censored_fraction {
        let _ = writeln!(t, "oracle censored  {:.1}%", 100.0 * f);
    }
    let _ = writeln!(t, "\n{:<24} {:>8} {:>10} {:>5}", "pair", "r", "p", "n");
    for row in &s.correlations {
        let pair = format!("r({}, {})", row.x, row.y);
        match &row.result {
            Some(r) => {
                let _ = writeln!(t, "{pair:<24} {:>8.3} {:>10.2e} {:>5} {}", r.r, r.p, r.n, row.stars);
            }
            None => {
                let _ = writeln!(t, "{pair:<24} {:>8} {:>10} {:>5}", "undef", "", "");
            }
        }
    }
    if let Some(q) = &s.quadrants {
        let _ = writeln!(
            t,
            "\nquadrants (ambiguity/sensitivity; medians U_amb {:.4}, delta_star {:.5})",
            q.median_u_amb, q.median_delta_star
        );
        for c in &q.classes {
            let mean = c.mean_dice.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(t, "  {:<4} n={:<4} mean Dice {mean}", c.quadrant.label(), c.count);
        }
    }
    t
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Paths of the report outputs inside `out`.
pub fn report_paths(out: &Path) -> [PathBuf; 3] {
    [
        out.join("report.json"),
        out.join("report.txt"),
        out.join("report_rows.csv"),
    ]
}

/// Computes the report and writes `report.json`, `report.txt` and
/// `report_rows.csv` under `out`. A failing stage aborts with its name and
/// leaves the rows finished so far in `report_partial.csv`.
pub fn run_report(
    manifest_path: &Path,
    mdn_ckpt: &Path,
    margin_ckpt: &Path,
    seg: &dyn Segmenter,
    segmenter_desc: &str,
    out: &Path,
    cfg: &ReportConfig,
) -> Result<AnalysisReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = load_manifest(manifest_path).map_err(|e| e.at_stage("load manifest"))?;
    let (mdn, _) = load_mdn(mdn_ckpt).map_err(|e| e.at_stage("load MDN"))?;
    let (margin, _) = load_margin(margin_ckpt).map_err(|e| e.at_stage("load margin predictor"))?;
    let config = ConfigEcho {
        manifest: manifest_path.display().to_string(),
        manifest_sha256: file_sha256(manifest_path)?,
        mdn_sha256: file_sha256(mdn_ckpt)?,
        margin_sha256: file_sha256(margin_ckpt)?,
        segmenter: segmenter_desc.to_string(),
        config: cfg.clone(),
    };
    let mut rows = Vec::new();
    let result = report_rows(&manifest, &mdn, &margin, seg, cfg, &mut rows);
    if let Err(e) = result {
        let partial = out.join("report_partial.csv");
        if let Err(w) = write_text(&partial, &rows_csv(&rows)) {
            warn!("could not flush partial rows: {w}");
        }
        return Err(e);
    }
    let method = match cfg.permutations {
        Some(resamples) => PValueMethod::Permutation {
            resamples,
            seed: cfg.seed,
        },
        None => PValueMethod::StudentT,
    };
    let summary = summarize(&rows, method).map_err(|e| e.at_stage("statistics"))?;
    let report = AnalysisReport { rows, summary, config };
    let [json, text, csv] = report_paths(out);
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(&json, bytes).map_err(|e| Error::io(&json, e))?;
    write_text(&text, &report_text(&report))?;
    write_text(&csv, &rows_csv(&report.rows))?;
    Ok(report)
}

/// Per-image rows, pushed as they complete so a failure keeps the prefix.
pub fn report_rows(
    manifest: &DatasetManifest,
    mdn: &MdnModel,
    margin: &MarginModel,
    seg: &dyn Segmenter,
    cfg: &ReportConfig,
    rows: &mut Vec<ReportRow>,
) -> Result<()> {
    let groups: Vec<&ImageGroup> = manifest.split(cfg.split).collect();
    let mut cache = EmbeddingCache::default();
    let items = margin_items(groups.iter().copied(), &mut cache).map_err(|e| e.at_stage("load embeddings"))?;
    let oracle = match &cfg.oracle {
        Some(oc) => Some(
            build_margin_dataset(seg, &items, Some(mdn), &[cfg.tau], cfg.prompt, oc, cfg.seed)
                .map_err(|e| e.at_stage("oracle margins"))?,
        ),
        None => None,
    };
    let root = Rng::new(cfg.seed);
    for (g, item) in groups.iter().zip(&items) {
        let mix = mdn_forward(mdn, &item.embedding).map_err(|e| e.at_stage("ambiguity"))?;
        let u_amb = ambiguity_score(&mix);
        let mut prng = root.named(&item.image.id).named("prompt");
        let b = representative_prompt(item, Some(mdn), cfg.prompt, &mut prng)
            .map_err(|e| e.at_stage("margin prediction"))?;
        let delta_hat =
            margin_predict(margin, &item.embedding, &b, cfg.tau).map_err(|e| e.at_stage("margin prediction"))?;
        let delta_oracle = match &oracle {
            Some(ds) => ds.records.iter().find(|r| r.id == item.image.id).map(|r| r.delta_star),
            None => None,
        };
        let dice = dice_scores(seg, &[g], cfg.dice_source, Some(mdn), &mut cache).map_err(|e| e.at_stage("dice"))?[0];
        rows.push(ReportRow {
            id: item.image.id.clone(),
            u_amb,
            delta_hat,
            delta_oracle,
            dice,
        });
    }
    Ok(())
}
