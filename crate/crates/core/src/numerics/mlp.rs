//! Two-layer perceptron `y = W2 · relu(W1 · x + b1) + b2` with hand-derived
//! backpropagation.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::rng::Rng;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Activations retained by [`mlp_forward`] for [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: DenseMatrix::zeros(output, hidden),
            b2: vec![0.0; output],
        }
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))` per layer, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(input, hidden, output);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        for w in p.w1.data_mut() {
            *w = rng.uniform_in(-a1, a1);
        }
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        for w in p.w2.data_mut() {
            *w = rng.uniform_in(-a2, a2);
        }
        p
    }

    pub fn from_parts(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        let p = Self { w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.w1.rows();
        if self.b1.len() != hidden {
            return Err(Error::shape("mlp b1", hidden, self.b1.len()));
        }
        if self.w2.cols() != hidden {
            return Err(Error::shape("mlp w2 columns", hidden, self.w2.cols()));
        }
        if self.b2.len() != self.w2.rows() {
            return Err(Error::shape("mlp b2", self.w2.rows(), self.b2.len()));
        }
        if self.flat_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp parameters".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .data()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.data())
            .chain(&self.b2)
    }

    fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .data_mut()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.data_mut().iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// Parameters in the fixed order `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<f64> {
        self.flat_iter().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("mlp flat parameters", self.num_params(), flat.len()));
        }
        for (p, &v) in self.flat_iter_mut().zip(flat) {
            *p = v;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn scale(&mut self, c: f64) {
        self.flat_iter_mut().for_each(|v| *v *= c);
    }
}

pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    if x.len() != p.input_dim() {
        return Err(Error::shape(
            format!("mlp input (w1 is {}x{})", p.w1.rows(), p.w1.cols()),
            p.input_dim(),
            x.len(),
        ));
    }
    let mut pre = p.w1.matvec(x);
    for (z, b) in pre.iter_mut().zip(&p.b1) {
        *z += b;
    }
    let hidden: Vec<f64> = pre.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
    let mut y = p.w2.matvec(&hidden);
    for (v, b) in y.iter_mut().zip(&p.b2) {
        *v += b;
    }
    Ok((
        y,
        MlpCache {
            input: x.to_vec(),
            pre_activation: pre,
            hidden,
        },
    ))
}

/// Adds the gradient of a loss with output gradient `dy` into `grad`.
pub fn mlp_backward_into(p: &MlpParams, cache: &MlpCache, dy: &[f64], grad: &mut MlpParams) -> Result<()> {
    if dy.len() != p.output_dim() {
        return Err(Error::shape("mlp output gradient", p.output_dim(), dy.len()));
    }
    if cache.hidden.len() != p.hidden_dim() || cache.input.len() != p.input_dim() {
        return Err(Error::shape(
            "mlp cache",
            format!("hidden {} / input {}", p.hidden_dim(), p.input_dim()),
            format!("hidden {} / input {}", cache.hidden.len(), cache.input.len()),
        ));
    }
    if grad.w1.shape() != p.w1.shape() || grad.w2.shape() != p.w2.shape() {
        return Err(Error::shape(
            "mlp gradient buffer",
            format!("{:?}/{:?}", p.w1.shape(), p.w2.shape()),
            format!("{:?}/{:?}", grad.w1.shape(), grad.w2.shape()),
        ));
    }
    grad.w2.add_outer(dy, &cache.hidden, 1.0);
    for (g, d) in grad.b2.iter_mut().zip(dy) {
        *g += d;
    }
    let mut dh = p.w2.matvec_t(dy);
    // relu'(0) := 0
    for (d, &z) in dh.iter_mut().zip(&cache.pre_activation) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
    grad.w1.add_outer(&dh, &cache.input, 1.0);
    for (g, d) in grad.b1.iter_mut().zip(&dh) {
        *g += d;
    }
    Ok(())
}

pub fn mlp_backward(p: &MlpParams, cache: &MlpCache, dy: &[f64]) -> Result<MlpParams> {
    let mut grad = p.zeros_like();
    mlp_backward_into(p, cache, dy, &mut grad)?;
    Ok(grad)
}
