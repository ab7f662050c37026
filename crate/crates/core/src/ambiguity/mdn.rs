//! Conditional mixture density network `p_θ(u | x)`: a two-layer MLP whose
//! `9K` outputs decode into `K` mixture logits, `4K` means and `4K`
//! softplus-positive variances.

use serde::{Deserialize, Serialize};

use super::mixture::{diag_gauss_log_pdf, MixtureParams, PROMPT_DIM};
use crate::error::{Error, Result};
use crate::numerics::{
    log_sum_exp, mlp_backward_into, mlp_forward, sigmoid, softplus, softplus_inv, AdamState, MlpParams, Rng,
    DEFAULT_HIDDEN,
};
use crate::prompts::ReparamPrompt;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const OUTPUTS_PER_COMPONENT: usize = 1 + 2 * PROMPT_DIM;

/// Affine input normalization `(x - shift) * scale`, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Per-coordinate standardization; constant coordinates keep scale 1.
    pub fn fit<'a>(inputs: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = inputs.collect();
        if rows.is_empty() {
            return Self::identity(dim);
        }
        let n = rows.len() as f64;
        let mut shift = vec![0.0; dim];
        for r in &rows {
            for (s, v) in shift.iter_mut().zip(r.iter()) {
                *s += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in scale.iter_mut().zip(r.iter()).zip(&shift) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in scale.iter_mut() {
            let sd = s.sqrt();
            *s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnModel {
    pub mlp: MlpParams,
    pub k: usize,
    pub norm: InputNorm,
    pub var_floor: f64,
}

impl MdnModel {
    pub fn new(mlp: MlpParams, k: usize, norm: InputNorm, var_floor: f64) -> Result<Self> {
        let m = Self {
            mlp,
            k,
            norm,
            var_floor,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidArgument("MDN needs K >= 1".into()));
        }
        if self.mlp.output_dim() != OUTPUTS_PER_COMPONENT * self.k {
            return Err(Error::shape(
                "MDN output layer",
                OUTPUTS_PER_COMPONENT * self.k,
                self.mlp.output_dim(),
            ));
        }
        if self.norm.dim() != self.mlp.input_dim() || self.norm.scale.len() != self.norm.dim() {
            return Err(Error::shape(
                "MDN input normalization",
                self.mlp.input_dim(),
                self.norm.dim(),
            ));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::InvalidArgument("variance floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

/// Decodes raw head outputs: softmax weights, identity means,
/// `softplus + floor` variances.
pub fn decode_head(raw: &[f64], k: usize, var_floor: f64) -> MixtureParams {
    let logits = &raw[..k];
    let z = log_sum_exp(logits);
    let weights: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
    let means = (0..k)
        .map(|c| std::array::from_fn(|d| raw[k + PROMPT_DIM * c + d]))
        .collect();
    let variances = (0..k)
        .map(|c| std::array::from_fn(|d| softplus(raw[(1 + PROMPT_DIM) * k + PROMPT_DIM * c + d]) + var_floor))
        .collect();
    MixtureParams {
        weights,
        means,
        variances,
    }
}

fn check_input(m: &MdnModel, x: &[f64]) -> Result<()> {
    if x.len() != m.embedding_dim() {
        return Err(Error::shape("MDN embedding", m.embedding_dim(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MDN embedding".into()));
    }
    Ok(())
}

pub fn mdn_forward(m: &MdnModel, x: &[f64]) -> Result<MixtureParams> {
    check_input(m, x)?;
    let (raw, _) = mlp_forward(&m.mlp, &m.norm.apply(x))?;
    Ok(decode_head(&raw, m.k, m.var_floor))
}

/// NLL of `u` under the decoded head and its gradient w.r.t. the raw outputs.
pub fn nll_and_head_grad(raw: &[f64], k: usize, var_floor: f64, u: &[f64; PROMPT_DIM]) -> (f64, Vec<f64>) {
    let mix = decode_head(raw, k, var_floor);
    let log_joint: Vec<f64> = (0..k)
        .map(|c| mix.weights[c].ln() + diag_gauss_log_pdf(u, &mix.means[c], &mix.variances[c]))
        .collect();
    let z = log_sum_exp(&log_joint);
    let mut dy = vec![0.0; raw.len()];
    for c in 0..k {
        let resp = (log_joint[c] - z).exp();
        dy[c] = mix.weights[c] - resp;
        for d in 0..PROMPT_DIM {
            let var = mix.variances[c][d];
            let r = u[d] - mix.means[c][d];
            dy[k + PROMPT_DIM * c + d] = -resp * r / var;
            let dvar = 0.5 * resp * (1.0 / var - r * r / (var * var));
            let raw_idx = (1 + PROMPT_DIM) * k + PROMPT_DIM * c + d;
            dy[raw_idx] = dvar * sigmoid(raw[raw_idx]);
        }
    }
    (-z, dy)
}

/// Mean NLL of a dataset and, optionally, the accumulated gradient.
pub fn mdn_loss(m: &MdnModel, data: &[(&[f64], ReparamPrompt)], grad: Option<&mut MlpParams>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let scale = 1.0 / data.len() as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (x, u) in data {
        check_input(m, x)?;
        let (raw, cache) = mlp_forward(&m.mlp, &m.norm.apply(x))?;
        let (nll, mut dy) = nll_and_head_grad(&raw, m.k, m.var_floor, &u.0);
        total += nll;
        if let Some(g) = grad.as_deref_mut() {
            dy.iter_mut().for_each(|v| *v *= scale);
            mlp_backward_into(&m.mlp, &cache, &dy, g)?;
        }
    }
    Ok(total * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub k: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub var_floor: f64,
    pub standardize_inputs: bool,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            hidden: DEFAULT_HIDDEN,
            lr: 1e-3,
            batch: 8,
            epochs: 100,
            seed: 0,
            var_floor: VARIANCE_FLOOR,
            standardize_inputs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MdnTrainOutcome {
    pub model: MdnModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

pub const OUTPUT_INIT_SCALE: f64 = 0.1;

/// Initial model: scaled-uniform weights, with the output biases placing
/// every component at the training-target mean and variance.
pub fn mdn_init(train: &[(&[f64], ReparamPrompt)], cfg: &MdnConfig, rng: &mut Rng) -> Result<MdnModel> {
    let dim = train
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let k = cfg.k;
    let mut mlp = MlpParams::init(dim, cfg.hidden, OUTPUTS_PER_COMPONENT * k, rng);
    // Shrink the output layer so the first predictions sit at the marginal
    // moments set through the biases below.
    mlp.w2.scale(OUTPUT_INIT_SCALE);
    let n = train.len() as f64;
    let mut mean = [0.0; PROMPT_DIM];
    for (_, u) in train {
        for d in 0..PROMPT_DIM {
            mean[d] += u.0[d] / n;
        }
    }
    let mut var = [0.0; PROMPT_DIM];
    for (_, u) in train {
        for d in 0..PROMPT_DIM {
            var[d] += (u.0[d] - mean[d]).powi(2) / n;
        }
    }
    for c in 0..k {
        for d in 0..PROMPT_DIM {
            mlp.b2[k + PROMPT_DIM * c + d] = mean[d];
            mlp.b2[(1 + PROMPT_DIM) * k + PROMPT_DIM * c + d] = softplus_inv(var[d].max(1e-4));
        }
    }
    let norm = if cfg.standardize_inputs {
        InputNorm::fit(train.iter().map(|(x, _)| *x), dim)
    } else {
        InputNorm::identity(dim)
    };
    MdnModel::new(mlp, k, norm, cfg.var_floor)
}

/// Minibatch Adam on mean NLL; returns the lowest-validation-NLL checkpoint.
pub fn mdn_train(
    train: &[(&[f64], ReparamPrompt)],
    val: &[(&[f64], ReparamPrompt)],
    cfg: &MdnConfig,
) -> Result<MdnTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "MDN training needs non-empty train and validation sets".into(),
        ));
    }
    if cfg.batch == 0 || cfg.k == 0 {
        return Err(Error::InvalidArgument("batch size and K must be >= 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = mdn_init(train, cfg, &mut root.named("mdn-init"))?;
    let mut adam = AdamState::new(model.mlp.num_params(), cfg.lr);
    let mut flat = model.mlp.flatten();
    let mut grad = model.mlp.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, mdn_loss(&model, val, None)?);

    for epoch in 1..=cfg.epochs {
        root.named("mdn-shuffle").substream(epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<(&[f64], ReparamPrompt)> = chunk.iter().map(|&i| train[i]).collect();
            grad.scale(0.0);
            let loss = mdn_loss(&model, &batch, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("non-finite NLL {loss}"),
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
        let val_loss = mdn_loss(&model, val, None)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                message: format!("non-finite validation NLL {val_loss}"),
            });
        }
        log.push(EpochLog {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
        });
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
        }
    }
    Ok(MdnTrainOutcome {
        model: best.0,
        log,
        best_epoch: best.1,
        best_val_nll: best.2,
    })
}
