//! Learned margin predictor `r_ψ(x, b, τ) -> δ̂*`: a two-layer MLP with a
//! softplus output trained under an ℓ1 loss.

use serde::{Deserialize, Serialize};

use super::oracle::MarginRecord;
use crate::ambiguity::mdn::InputNorm;
use crate::error::{Error, Result};
use crate::numerics::{
    mlp_backward_into, mlp_forward, sigmoid, softplus, softplus_inv, AdamState, MlpParams, Rng, DEFAULT_HIDDEN,
};
use crate::prompts::PromptBox;

/// Extra inputs after the embedding: four box coordinates and `τ`.
pub const QUERY_EXTRA: usize = 5;
const MIN_OUTPUT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginModel {
    pub mlp: MlpParams,
    pub norm: InputNorm,
}

impl MarginModel {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.mlp.output_dim() != 1 {
            return Err(Error::shape("margin predictor output", 1, self.mlp.output_dim()));
        }
        if self.mlp.input_dim() <= QUERY_EXTRA {
            return Err(Error::shape(
                "margin predictor input",
                format!("> {QUERY_EXTRA}"),
                self.mlp.input_dim(),
            ));
        }
        if self.norm.dim() != self.mlp.input_dim() || self.norm.scale.len() != self.norm.dim() {
            return Err(Error::shape(
                "margin predictor normalization",
                self.mlp.input_dim(),
                self.norm.dim(),
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.input_dim() - QUERY_EXTRA
    }
}

/// `concat(x, b, τ)`.
pub fn query_features(x: &[f64], b: &PromptBox, tau: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + QUERY_EXTRA);
    v.extend_from_slice(x);
    v.extend_from_slice(&b.to_array());
    v.push(tau);
    v
}

fn raw_output(model: &MarginModel, features: &[f64]) -> Result<f64> {
    if features.len() != model.mlp.input_dim() {
        return Err(Error::shape("margin query", model.mlp.input_dim(), features.len()));
    }
    let (y, _) = mlp_forward(&model.mlp, &model.norm.apply(features))?;
    Ok(y[0])
}

/// Strictly positive predicted margin.
pub fn margin_predict(model: &MarginModel, x: &[f64], b: &PromptBox, tau: f64) -> Result<f64> {
    if x.len() != model.embedding_dim() {
        return Err(Error::shape("margin query embedding", model.embedding_dim(), x.len()));
    }
    let z = raw_output(model, &query_features(x, b, tau))?;
    Ok(softplus(z).max(MIN_OUTPUT))
}

/// One training example: features and regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginExample {
    pub features: Vec<f64>,
    pub target: f64,
}

impl From<&MarginRecord> for MarginExample {
    fn from(r: &MarginRecord) -> Self {
        Self {
            features: query_features(&r.embedding, &r.b, r.tau),
            target: r.target(),
        }
    }
}

/// Mean absolute error and, optionally, its accumulated gradient.
pub fn margin_loss(model: &MarginModel, data: &[MarginExample], grad: Option<&mut MlpParams>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty margin dataset".into()));
    }
    let scale = 1.0 / data.len() as f64;
    let mut grad = grad;
    let mut total = 0.0;
    for ex in data {
        if ex.features.len() != model.mlp.input_dim() {
            return Err(Error::shape("margin example", model.mlp.input_dim(), ex.features.len()));
        }
        let (y, cache) = mlp_forward(&model.mlp, &model.norm.apply(&ex.features))?;
        let residual = softplus(y[0]) - ex.target;
        total += residual.abs();
        if let Some(g) = grad.as_deref_mut() {
            let sign = if residual > 0.0 {
                1.0
            } else if residual < 0.0 {
                -1.0
            } else {
                0.0
            };
            let dy = scale * sign * sigmoid(y[0]);
            mlp_backward_into(&model.mlp, &cache, &[dy], g)?;
        }
    }
    Ok(total * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            lr: 1e-3,
            batch: 64,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginEpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct MarginTrainOutcome {
    pub model: MarginModel,
    pub log: Vec<MarginEpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Starts at the median target: shrunken output weights and a bias at
/// `softplus⁻¹(median)`.
pub fn margin_init(train: &[MarginExample], cfg: &MarginConfig, rng: &mut Rng) -> Result<MarginModel> {
    let dim = train
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| Error::InvalidArgument("empty margin training set".into()))?;
    let mut mlp = MlpParams::init(dim, cfg.hidden, 1, rng);
    mlp.w2.scale(crate::ambiguity::mdn::OUTPUT_INIT_SCALE);
    let mut targets: Vec<f64> = train.iter().map(|e| e.target).collect();
    mlp.b2[0] = softplus_inv(median(&mut targets).max(1e-6));
    let norm = InputNorm::fit(train.iter().map(|e| e.features.as_slice()), dim);
    let model = MarginModel { mlp, norm };
    model.validate()?;
    Ok(model)
}

/// Minibatch Adam on ℓ1; returns the lowest-validation-MAE checkpoint.
pub fn margin_train(train: &[MarginExample], val: &[MarginExample], cfg: &MarginConfig) -> Result<MarginTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "margin training needs non-empty train and validation sets".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = margin_init(train, cfg, &mut root.named("margin-init"))?;
    let mut adam = AdamState::new(model.mlp.num_params(), cfg.lr);
    let mut flat = model.mlp.flatten();
    let mut grad = model.mlp.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, margin_loss(&model, val, None)?);
    for epoch in 1..=cfg.epochs {
        root.named("margin-shuffle").substream(epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<MarginExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            grad.scale(0.0);
            let loss = margin_loss(&model, &batch, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("non-finite l1 loss {loss}"),
                });
            }
            sum += loss * chunk.len() as f64;
            adam.step(&mut flat, &grad.flatten()).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                message: e.to_string(),
            })?;
            model.mlp.assign_flat(&flat)?;
        }
        let val_mae = margin_loss(&model, val, None)?;
        log.push(MarginEpochLog {
            epoch,
            train_mae: sum / train.len() as f64,
            val_mae,
        });
        if val_mae < best.2 {
            best = (model.clone(), epoch, val_mae);
        }
    }
    Ok(MarginTrainOutcome {
        model: best.0,
        log,
        best_epoch: best.1,
        best_val_mae: best.2,
    })
}
