//! Command-line surface. Every command reads the manifest named by
//! `--manifest`, writes into `--out`, and draws all randomness from `--seed`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::ambiguity::{
    ambiguity_score, gmm_em_fit, mdn_forward, mdn_train, select_k, GmmConfig, GmmModel, MdnConfig, MdnModel,
    MixtureParams,
};
use crate::analysis::{
    generate_synthetic_dataset, margin_items, mean_sem, report_text, run_report, DiceSource, ReportConfig, SynthConfig,
};
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_margin, load_mdn, save_checkpoint, CheckpointMeta, Model};
use crate::io::manifest::{load_manifest, load_mask, DatasetManifest, EmbeddingCache, ImageGroup, Split};
use crate::io::tensor::write_pdt1_f64;
use crate::numerics::Rng;
use crate::prompts::{box_to_reparam, PerturbationKind, PerturbationSpec, PromptBox, ReparamPrompt};
use crate::segmenters::{AnySegmenter, ExternalHandle, ExternalSegmenter, SyntheticSegmenter, DEFAULT_RESOLUTION};
use crate::stability::{
    build_margin_dataset, margin_predict, margin_train, oracle::validate_tau, representative_prompt,
    variance_decomposition, Discrepancy, MarginConfig, MarginExample, MarginRecord, OracleConfig, PromptChoice,
    DEFAULT_GRID, DEFAULT_SAMPLES_PER_LEVEL, DEFAULT_TAU,
};
use crate::uncertainty::{
    compare_strategies, export_map, make_strategy, EntropyMode, StrategyKind, StrategyParams, DEFAULT_ENSEMBLE_SIZE,
};

/// Variance standing in for zero in a point prompt source.
const POINT_SOURCE_VARIANCE: f64 = 1e-300;

#[derive(Debug, Parser)]
#[command(
    name = "promptdep",
    version,
    about = "Prompt-dependence analysis for promptable segmentation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON Lines dataset manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `synthetic` or `external:<command>`; the command template must
    /// contain `{request}` and `{outdir}`.
    #[arg(long, global = true, default_value = "synthetic")]
    pub segmenter: SegmenterSpec,
    /// Mask resolution as `HxW` or a single size.
    #[arg(long, global = true)]
    pub resolution: Option<Resolution>,
    /// Margin tolerance.
    #[arg(long, global = true, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Ascending perturbation amplitudes searched by the oracle.
    #[arg(long, global = true, value_delimiter = ',', default_values_t = DEFAULT_GRID.to_vec())]
    pub grid: Vec<f64>,
    #[arg(long, global = true, default_value_t = DEFAULT_SAMPLES_PER_LEVEL)]
    pub samples_per_level: usize,
    /// Mixture components of the MDN.
    #[arg(long = "K", global = true, default_value_t = 8)]
    pub k: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_ENSEMBLE_SIZE)]
    pub ensemble_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmenterSpec {
    Synthetic,
    External(String),
}

impl FromStr for SegmenterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synthetic" => Ok(SegmenterSpec::Synthetic),
            Some(("external", cmd)) if !cmd.trim().is_empty() => Ok(SegmenterSpec::External(cmd.to_string())),
            _ => Err(Error::InvalidArgument(format!(
                "segmenter must be 'synthetic' or 'external:<command>', got '{s}'"
            ))),
        }
    }
}

impl SegmenterSpec {
    fn describe(&self) -> String {
        match self {
            SegmenterSpec::Synthetic => "synthetic".into(),
            SegmenterSpec::External(cmd) => format!("external:{cmd}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution(pub usize, pub usize);

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("resolution must be HxW or N with positive sizes, got '{s}'"));
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
        match s.split_once('x') {
            Some((h, w)) => Ok(Resolution(parse(h)?, parse(w)?)),
            None => {
                let n = parse(s)?;
                Ok(Resolution(n, n))
            }
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ambiguity and softness.
    SynthGen(SynthGenArgs),
    /// Fit unconditional GMMs over prompts and pick K by BIC.
    SelectK(SelectKArgs),
    /// Train the conditional mixture density network.
    TrainMdn(TrainMdnArgs),
    /// Per-image prompt ambiguity from a trained MDN.
    Ambiguity(AmbiguityArgs),
    /// Oracle stability margins by perturbation search.
    OracleMargins(OracleMarginsArgs),
    /// Train the margin predictor on oracle records.
    TrainMargin(TrainMarginArgs),
    /// Predicted stability margins at representative prompts.
    PredictMargins(PredictMarginsArgs),
    /// Split per-pixel mask variance into local and ambiguity terms.
    DecomposeVariance(DecomposeArgs),
    /// Entropy maps of prompt-sampled mask ensembles and their metrics.
    UncertaintyMaps(UncertaintyArgs),
    /// Dataset-level report: correlations, Dice and quadrants.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub ambiguity_fraction: Option<f64>,
    /// Softness range `LO,HI`; repeat for a mixture of ranges.
    #[arg(long = "softness")]
    pub softness: Vec<RangeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeArg(pub f64, pub f64);

impl FromStr for RangeArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("range must be LO,HI, got '{s}'"));
        let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        Ok(RangeArg(lo, hi))
    }
}

#[derive(Debug, Args)]
pub struct SelectKArgs {
    /// Candidate component counts; defaults to 1..=K.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<usize>,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// EM restarts per candidate.
    #[arg(long, default_value_t = 1)]
    pub n_init: usize,
}

#[derive(Debug, Args)]
pub struct TrainMdnArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Feed raw embeddings instead of standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Args)]
pub struct AmbiguityArgs {
    #[arg(long)]
    pub mdn: PathBuf,
    /// Restrict to one split.
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct OracleMarginsArgs {
    /// MDN checkpoint; required unless the prompt is `ground_truth`.
    #[arg(long)]
    pub mdn: Option<PathBuf>,
    /// `mixture_mode`, `sampled` or `ground_truth`; defaults to the mixture
    /// mode with an MDN and the first annotated box without one.
    #[arg(long)]
    pub prompt: Option<PromptChoice>,
    /// Tolerances to label; defaults to `--tau`.
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<f64>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["translation".to_string(), "scale".to_string()])]
    pub kinds: Vec<String>,
    #[arg(long, default_value = "dice")]
    pub discrepancy: Discrepancy,
}

#[derive(Debug, Args)]
pub struct TrainMarginArgs {
    /// Oracle records from `oracle-margins`.
    #[arg(long)]
    pub margins: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct PredictMarginsArgs {
    #[arg(long)]
    pub margin: PathBuf,
    #[arg(long)]
    pub mdn: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<PromptChoice>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Prompt source: `mdn`, `d0` or `point` (the first annotated box).
    #[arg(long, default_value = "mdn")]
    pub source: String,
    #[arg(long)]
    pub mdn: Option<PathBuf>,
    /// Unconditional GMM written by `select-k`.
    #[arg(long)]
    pub d0: Option<PathBuf>,
    #[arg(long, default_value = "translation")]
    pub kind: PerturbationKind,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[arg(long, default_value_t = 16)]
    pub n_b: usize,
    #[arg(long, default_value_t = 8)]
    pub n_delta: usize,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Process at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    /// Strategies to compare; defaults to those whose inputs are given.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<StrategyKind>,
    #[arg(long)]
    pub mdn: Option<PathBuf>,
    #[arg(long)]
    pub d0: Option<PathBuf>,
    /// Jitter amplitude around the first annotated box.
    #[arg(long, default_value_t = 0.05)]
    pub jitter_delta: f64,
    #[arg(long, default_value = "vote")]
    pub mode: EntropyMode,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip writing per-image maps.
    #[arg(long)]
    pub no_maps: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub mdn: PathBuf,
    #[arg(long)]
    pub margin: PathBuf,
    /// Also compute oracle margins at the representative prompts.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "mixture_mode")]
    pub prompt: PromptChoice,
    #[arg(long, default_value = "gt_boxes")]
    pub dice_source: DiceSource,
    /// Permutation p-values with this many resamples.
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

/// Parses `args` and runs the selected command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    if let Command::SynthGen(a) = &cli.command {
        return synth_gen(g, &out, a);
    }
    let ctx = Context::new(g, &out)?;
    let result = match &cli.command {
        Command::SynthGen(_) => unreachable!("handled above"),
        Command::SelectK(a) => ctx.select_k(a),
        Command::TrainMdn(a) => ctx.train_mdn(a),
        Command::Ambiguity(a) => ctx.ambiguity(a),
        Command::OracleMargins(a) => ctx.oracle_margins(a),
        Command::TrainMargin(a) => ctx.train_margin(a),
        Command::PredictMargins(a) => ctx.predict_margins(a),
        Command::DecomposeVariance(a) => ctx.decompose(a),
        Command::UncertaintyMaps(a) => ctx.uncertainty(a),
        Command::Report(a) => ctx.report(a),
    };
    ctx.cleanup();
    result
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("malformed record: {e}"),
            })
        })
        .collect()
}

fn synth_gen(g: &GlobalArgs, out: &Path, a: &SynthGenArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthConfig::default(),
    };
    cfg.seed = g.seed;
    if let Some(n) = a.n_scenes {
        cfg.n_scenes = n;
    }
    if let Some(f) = a.ambiguity_fraction {
        cfg.ambiguity_fraction = f;
    }
    if !a.softness.is_empty() {
        cfg.softness_ranges = a.softness.iter().map(|r| (r.0, r.1)).collect();
    }
    if let Some(Resolution(h, w)) = g.resolution {
        cfg.resolution = (h, w);
    }
    cfg.validate()?;
    let summary = generate_synthetic_dataset(&cfg, out)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    info!(
        "wrote {} scenes ({} ambiguous, {} records) to {}",
        summary.scenes,
        summary.ambiguous,
        summary.records,
        out.display()
    );
    Ok(())
}

struct Context<'a> {
    g: &'a GlobalArgs,
    out: PathBuf,
    manifest: DatasetManifest,
    seg: AnySegmenter,
    workdir: Option<PathBuf>,
}

#[derive(Serialize)]
struct AmbiguityRow<'a> {
    id: &'a str,
    split: Split,
    u_amb: f64,
    mixture: MixtureParams,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    split: Split,
    #[serde(rename = "box")]
    b: PromptBox,
    tau: f64,
    delta_hat: f64,
}

#[derive(Serialize)]
struct VarianceRow<'a> {
    id: &'a str,
    local: f64,
    ambiguity: f64,
    total: f64,
}

#[derive(Serialize)]
struct MapRow<'a> {
    id: &'a str,
    strategy: StrategyKind,
    #[serde(flatten)]
    metrics: &'a crate::uncertainty::MapMetrics,
}

#[derive(Serialize)]
struct StrategySummary {
    strategy: StrategyKind,
    images: usize,
    auroc: Option<crate::analysis::MeanSem>,
    delta_entropy: Option<crate::analysis::MeanSem>,
    nll: Option<crate::analysis::MeanSem>,
}

#[derive(Serialize)]
struct TrainSummary<C: Serialize, L: Serialize> {
    config: C,
    train_examples: usize,
    val_examples: usize,
    best_epoch: usize,
    best_val_loss: f64,
    log: Vec<L>,
}

impl<'a> Context<'a> {
    fn new(g: &'a GlobalArgs, out: &Path) -> Result<Self> {
        let path = g
            .manifest
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--manifest is required".into()))?;
        let manifest = load_manifest(path)?;
        let Resolution(h, w) = g
            .resolution
            .unwrap_or(Resolution(DEFAULT_RESOLUTION.0, DEFAULT_RESOLUTION.1));
        let (seg, workdir) = match &g.segmenter {
            SegmenterSpec::Synthetic => (AnySegmenter::Synthetic(SyntheticSegmenter { resolution: (h, w) }), None),
            SegmenterSpec::External(cmd) => {
                let dir = out.join(".segmenter");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let dir = std::path::absolute(&dir).map_err(|e| Error::io(&dir, e))?;
                let handle = ExternalHandle::new(cmd.clone(), &dir, (h, w))?;
                (AnySegmenter::External(ExternalSegmenter::new(handle)), Some(dir))
            }
        };
        Ok(Self {
            g,
            out: out.to_path_buf(),
            manifest,
            seg,
            workdir,
        })
    }

    fn cleanup(&self) {
        if let Some(dir) = &self.workdir {
            if let Err(e) = fs::remove_dir_all(dir) {
                warn!("could not remove {}: {e}", dir.display());
            }
        }
    }

    fn groups(&self, split: Option<Split>) -> Vec<&ImageGroup> {
        self.manifest
            .images
            .iter()
            .filter(|g| split.is_none_or(|s| g.split == s))
            .collect()
    }

    fn oracle_config(&self, kinds: &[String], discrepancy: Discrepancy) -> Result<OracleConfig> {
        let cfg = OracleConfig {
            grid: self.g.grid.clone(),
            samples_per_level: self.g.samples_per_level,
            kinds: kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?,
            discrepancy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn prompt_pairs(&self, split: Split, cache: &mut EmbeddingCache) -> Result<Vec<(Vec<f64>, ReparamPrompt)>> {
        let mut out = Vec::new();
        for g in self.manifest.split(split) {
            let x = cache.get(&g.embedding)?.to_vec();
            for b in &g.boxes {
                out.push((x.clone(), box_to_reparam(b)?));
            }
        }
        Ok(out)
    }

    fn select_k(&self, a: &SelectKArgs) -> Result<()> {
        let data: Vec<ReparamPrompt> = self
            .manifest
            .split(a.split)
            .flat_map(|g| g.boxes.iter())
            .map(box_to_reparam)
            .collect::<Result<_>>()?;
        let candidates: Vec<usize> = if a.candidates.is_empty() {
            (1..=self.g.k).collect()
        } else {
            a.candidates.clone()
        };
        let cfg = GmmConfig {
            n_init: a.n_init,
            ..GmmConfig::default()
        };
        let outcome = select_k(&data, &candidates, self.g.seed, &cfg)?;
        let fit = gmm_em_fit(&data, outcome.best_k, Rng::new(self.g.seed).named("d0").seed(), &cfg)?;
        write_json(&self.out.join("select_k.json"), &outcome)?;
        write_json(&self.out.join("d0.json"), &fit.model)?;
        info!("BIC selects K={} from {} prompts", outcome.best_k, data.len());
        Ok(())
    }

    fn load_d0(path: &Path) -> Result<GmmModel> {
        let model: GmmModel = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        model.mixture.validate()?;
        Ok(model)
    }

    fn train_mdn(&self, a: &TrainMdnArgs) -> Result<()> {
        let mut cache = EmbeddingCache::default();
        let train = self.prompt_pairs(Split::Train, &mut cache)?;
        let val = self.prompt_pairs(Split::Val, &mut cache)?;
        let view = |v: &'_ [(Vec<f64>, ReparamPrompt)]| v.iter().map(|(x, u)| (x.clone(), *u)).collect::<Vec<_>>();
        let (train, val) = (view(&train), view(&val));
        let tr: Vec<(&[f64], ReparamPrompt)> = train.iter().map(|(x, u)| (x.as_slice(), *u)).collect();
        let va: Vec<(&[f64], ReparamPrompt)> = val.iter().map(|(x, u)| (x.as_slice(), *u)).collect();
        let cfg = MdnConfig {
            k: self.g.k,
            hidden: a.hidden,
            lr: a.lr,
            batch: a.batch,
            epochs: a.epochs,
            seed: self.g.seed,
            standardize_inputs: !a.no_standardize,
            ..MdnConfig::default()
        };
        let outcome = mdn_train(&tr, &va, &cfg)?;
        save_checkpoint(
            &Model::Mdn(outcome.model),
            CheckpointMeta {
                seed: self.g.seed,
                best_val_loss: outcome.best_val_nll,
            },
            &self.out.join("mdn.ckpt"),
        )?;
        write_json(
            &self.out.join("mdn_train.json"),
            &TrainSummary {
                config: cfg,
                train_examples: tr.len(),
                val_examples: va.len(),
                best_epoch: outcome.best_epoch,
                best_val_loss: outcome.best_val_nll,
                log: outcome.log,
            },
        )?;
        info!(
            "MDN best validation NLL {:.4} at epoch {}",
            outcome.best_val_nll, outcome.best_epoch
        );
        Ok(())
    }

    fn ambiguity(&self, a: &AmbiguityArgs) -> Result<()> {
        let (mdn, _) = load_mdn(&a.mdn)?;
        let mut cache = EmbeddingCache::default();
        let mut rows = Vec::new();
        for g in self.groups(a.split) {
            let mix = mdn_forward(&mdn, cache.get(&g.embedding)?)?;
            rows.push(AmbiguityRow {
                id: &g.id,
                split: g.split,
                u_amb: ambiguity_score(&mix),
                mixture: mix,
            });
        }
        write_jsonl(&self.out.join("ambiguity.jsonl"), rows)
    }

    fn prompt_choice(choice: Option<PromptChoice>, mdn: Option<&MdnModel>) -> PromptChoice {
        choice.unwrap_or(if mdn.is_some() {
            PromptChoice::MixtureMode
        } else {
            PromptChoice::GroundTruth
        })
    }

    fn oracle_margins(&self, a: &OracleMarginsArgs) -> Result<()> {
        let mdn = a.mdn.as_deref().map(load_mdn).transpose()?.map(|(m, _)| m);
        let taus = if a.taus.is_empty() {
            vec![self.g.tau]
        } else {
            a.taus.clone()
        };
        let cfg = self.oracle_config(&a.kinds, a.discrepancy)?;
        let mut cache = EmbeddingCache::default();
        let items = margin_items(self.groups(a.split).into_iter(), &mut cache)?;
        let choice = Self::prompt_choice(a.prompt, mdn.as_ref());
        let ds = build_margin_dataset(&self.seg, &items, mdn.as_ref(), &taus, choice, &cfg, self.g.seed)?;
        write_jsonl(&self.out.join("margins.jsonl"), &ds.records)?;
        #[derive(Serialize)]
        struct Skipped<'a> {
            id: &'a str,
            reason: &'a str,
        }
        write_jsonl(
            &self.out.join("margins_skipped.jsonl"),
            ds.skipped.iter().map(|(id, reason)| Skipped { id, reason }),
        )?;
        let censored = ds.records.iter().filter(|r| r.censored()).count();
        info!(
            "{} margin records, {} not reached, {} images skipped",
            ds.records.len(),
            censored,
            ds.skipped.len()
        );
        if ds.records.is_empty() && !ds.skipped.is_empty() {
            let (id, reason) = &ds.skipped[0];
            return Err(Error::External(format!(
                "all {} images failed; first '{id}': {reason}",
                ds.skipped.len()
            )));
        }
        Ok(())
    }

    fn train_margin(&self, a: &TrainMarginArgs) -> Result<()> {
        let records: Vec<MarginRecord> = read_jsonl(&a.margins)?;
        for r in &records {
            r.check()?;
        }
        let split_of = |id: &str| self.manifest.images.iter().find(|g| g.id == id).map(|g| g.split);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for r in &records {
            match split_of(&r.id) {
                Some(Split::Train) => train.push(MarginExample::from(r)),
                Some(Split::Val) => val.push(MarginExample::from(r)),
                Some(Split::Test) => {}
                None => warn!("margin record '{}' is not in the manifest", r.id),
            }
        }
        let cfg = MarginConfig {
            hidden: a.hidden,
            lr: a.lr,
            batch: a.batch,
            epochs: a.epochs,
            seed: self.g.seed,
        };
        let outcome = margin_train(&train, &val, &cfg)?;
        save_checkpoint(
            &Model::Margin(outcome.model),
            CheckpointMeta {
                seed: self.g.seed,
                best_val_loss: outcome.best_val_mae,
            },
            &self.out.join("margin.ckpt"),
        )?;
        write_json(
            &self.out.join("margin_train.json"),
            &TrainSummary {
                config: cfg,
                train_examples: train.len(),
                val_examples: val.len(),
                best_epoch: outcome.best_epoch,
                best_val_loss: outcome.best_val_mae,
                log: outcome.log,
            },
        )?;
        info!(
            "margin predictor best validation MAE {:.5} at epoch {}",
            outcome.best_val_mae, outcome.best_epoch
        );
        Ok(())
    }

    fn predict_margins(&self, a: &PredictMarginsArgs) -> Result<()> {
        validate_tau(self.g.tau)?;
        let (model, _) = load_margin(&a.margin)?;
        let mdn = a.mdn.as_deref().map(load_mdn).transpose()?.map(|(m, _)| m);
        let choice = Self::prompt_choice(a.prompt, mdn.as_ref());
        let groups = self.groups(a.split);
        let mut cache = EmbeddingCache::default();
        let items = margin_items(groups.iter().copied(), &mut cache)?;
        let root = Rng::new(self.g.seed);
        let mut rows = Vec::new();
        for (g, item) in groups.iter().zip(&items) {
            let b = representative_prompt(item, mdn.as_ref(), choice, &mut root.named(&g.id).named("prompt"))?;
            rows.push(PredictionRow {
                id: &g.id,
                split: g.split,
                b,
                tau: self.g.tau,
                delta_hat: margin_predict(&model, &item.embedding, &b, self.g.tau)?,
            });
        }
        write_jsonl(&self.out.join("predicted_margins.jsonl"), rows)
    }

    fn decompose(&self, a: &DecomposeArgs) -> Result<()> {
        let spec = PerturbationSpec::new(a.kind, a.delta)?;
        let mdn = match (a.source.as_str(), &a.mdn) {
            ("mdn", Some(p)) => Some(load_mdn(p)?.0),
            ("mdn", None) => return Err(Error::InvalidArgument("--source mdn needs --mdn".into())),
            _ => None,
        };
        let d0 = match (a.source.as_str(), &a.d0) {
            ("d0", Some(p)) => Some(Self::load_d0(p)?),
            ("d0", None) => return Err(Error::InvalidArgument("--source d0 needs --d0".into())),
            ("mdn" | "point", _) => None,
            (other, _) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown prompt source '{other}' (expected mdn, d0 or point)"
                )))
            }
        };
        let dir = self.out.join("variance");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut cache = EmbeddingCache::default();
        let root = Rng::new(self.g.seed);
        let mut rows = Vec::new();
        for g in self.manifest.split(a.split).take(a.limit.unwrap_or(usize::MAX)) {
            let mix = match (&mdn, &d0) {
                (Some(m), _) => mdn_forward(m, cache.get(&g.embedding)?)?,
                (None, Some(d)) => d.mixture.clone(),
                (None, None) => {
                    let b = g
                        .boxes
                        .first()
                        .ok_or_else(|| Error::InvalidArgument(format!("'{}' has no boxes", g.id)))?;
                    MixtureParams::single(box_to_reparam(b)?.0, [POINT_SOURCE_VARIANCE; 4])?
                }
            };
            let d = variance_decomposition(&self.seg, &g.image, &mix, &spec, a.n_b, a.n_delta, &root.named(&g.id))?;
            for (name, map) in [("local", &d.local), ("ambiguity", &d.ambiguity), ("total", &d.total)] {
                write_pdt1_f64(
                    &dir.join(format!("{}_{name}.pdt", g.id)),
                    &[d.height, d.width],
                    &map.values,
                )?;
            }
            rows.push(VarianceRow {
                id: &g.id,
                local: d.local.mean,
                ambiguity: d.ambiguity.mean,
                total: d.total.mean,
            });
        }
        write_jsonl(&self.out.join("variance.jsonl"), rows)
    }

    fn uncertainty(&self, a: &UncertaintyArgs) -> Result<()> {
        let mdn = a.mdn.as_deref().map(load_mdn).transpose()?.map(|(m, _)| m);
        let d0 = a.d0.as_deref().map(Self::load_d0).transpose()?;
        let kinds: Vec<StrategyKind> = if a.strategies.is_empty() {
            let mut k = vec![StrategyKind::Jitter];
            if d0.is_some() {
                k.push(StrategyKind::D0);
            }
            if mdn.is_some() {
                k.push(StrategyKind::CondMdn);
            }
            k
        } else {
            a.strategies.clone()
        };
        let dir = self.out.join("maps");
        if !a.no_maps {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut cache = EmbeddingCache::default();
        let root = Rng::new(self.g.seed);
        let mut rows: Vec<(String, StrategyKind, crate::uncertainty::MapMetrics)> = Vec::new();
        for g in self.manifest.split(a.split).take(a.limit.unwrap_or(usize::MAX)) {
            let Some(mask_path) = &g.mask else {
                warn!("skipping '{}': no ground-truth mask", g.id);
                continue;
            };
            let gt = load_mask(mask_path)?.binarize(0.5);
            let x = cache.get(&g.embedding)?.to_vec();
            let params = StrategyParams {
                b0: g.boxes.first().copied(),
                jitter_delta: Some(a.jitter_delta),
                d0: d0.as_ref().map(|m| &m.mixture),
                mdn: mdn.as_ref(),
                embedding: Some(&x),
            };
            let samplers = kinds
                .iter()
                .map(|&k| make_strategy(k, &params))
                .collect::<Result<Vec<_>>>()?;
            let results = compare_strategies(
                &self.seg,
                &g.image,
                &gt,
                &samplers,
                self.g.ensemble_size,
                &root.named(&g.id),
                a.mode,
            )?;
            for r in results {
                if !a.no_maps {
                    let e = &r.maps.entropy;
                    export_map(
                        &dir,
                        &format!("{}_{}", g.id, r.kind.tag()),
                        e.height,
                        e.width,
                        &e.values,
                    )?;
                }
                rows.push((g.id.clone(), r.kind, r.metrics));
            }
        }
        write_jsonl(
            &self.out.join("uncertainty_metrics.jsonl"),
            rows.iter().map(|(id, strategy, metrics)| MapRow {
                id,
                strategy: *strategy,
                metrics,
            }),
        )?;
        let summary: Vec<StrategySummary> = kinds
            .iter()
            .map(|&k| {
                let of = |f: &dyn Fn(&crate::uncertainty::MapMetrics) -> Option<f64>| {
                    let v: Vec<f64> = rows.iter().filter(|r| r.1 == k).filter_map(|r| f(&r.2)).collect();
                    mean_sem(&v).ok()
                };
                StrategySummary {
                    strategy: k,
                    images: rows.iter().filter(|r| r.1 == k).count(),
                    auroc: of(&|m| m.auroc),
                    delta_entropy: of(&|m| m.delta_entropy),
                    nll: of(&|m| Some(m.nll)),
                }
            })
            .collect();
        write_json(&self.out.join("uncertainty_summary.json"), &summary)
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        validate_tau(self.g.tau)?;
        let oracle = if a.oracle {
            Some(self.oracle_config(&["translation".into(), "scale".into()], Discrepancy::Dice)?)
        } else {
            None
        };
        let cfg = ReportConfig {
            split: a.split,
            tau: self.g.tau,
            seed: self.g.seed,
            prompt: a.prompt,
            dice_source: a.dice_source,
            oracle,
            permutations: a.permutations,
        };
        let manifest = self.g.manifest.as_ref().expect("checked in Context::new");
        let report = run_report(
            manifest,
            &a.mdn,
            &a.margin,
            &self.seg,
            &self.g.segmenter.describe(),
            &self.out,
            &cfg,
        )?;
        print!("{}", report_text(&report));
        Ok(())
    }
}
