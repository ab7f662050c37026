//! Model checkpoints: magic `PDCK`, u32 LE format version, u64 LE header
//! length, a JSON header, then one `PDT8` tensor per header entry in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{decode_f64_at, encode_f64_into};
use crate::ambiguity::mdn::InputNorm;
use crate::ambiguity::MdnModel;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, MlpParams};
use crate::stability::MarginModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mdn,
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub format_version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Mixture components; absent for the margin predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_floor: Option<f64>,
    pub seed: u64,
    pub best_val_loss: f64,
    pub tensors: Vec<TensorEntry>,
}

/// Training provenance stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mdn(MdnModel),
    Margin(MarginModel),
}

fn tensors_of(mlp: &MlpParams, norm: &InputNorm) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    vec![
        ("w1", vec![mlp.w1.rows(), mlp.w1.cols()], mlp.w1.data().to_vec()),
        ("b1", vec![mlp.b1.len()], mlp.b1.clone()),
        ("w2", vec![mlp.w2.rows(), mlp.w2.cols()], mlp.w2.data().to_vec()),
        ("b2", vec![mlp.b2.len()], mlp.b2.clone()),
        ("norm_shift", vec![norm.shift.len()], norm.shift.clone()),
        ("norm_scale", vec![norm.scale.len()], norm.scale.clone()),
    ]
}

pub fn encode_checkpoint(model: &Model, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let (kind, mlp, norm, k, var_floor) = match model {
        Model::Mdn(m) => {
            m.validate()?;
            (ModelKind::Mdn, &m.mlp, &m.norm, Some(m.k), Some(m.var_floor))
        }
        Model::Margin(m) => {
            m.validate()?;
            (ModelKind::Margin, &m.mlp, &m.norm, None, None)
        }
    };
    let tensors = tensors_of(mlp, norm);
    let header = CheckpointHeader {
        kind,
        format_version: CHECKPOINT_VERSION,
        input_dim: mlp.input_dim(),
        hidden_dim: mlp.hidden_dim(),
        output_dim: mlp.output_dim(),
        k,
        var_floor,
        seed: meta.seed,
        best_val_loss: meta.best_val_loss,
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.to_string(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, shape, data) in &tensors {
        encode_f64_into(shape, data, &mut out)?;
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointHeader)> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 {
        return Err(corrupt(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"),
        });
    }
    let mut len8 = [0u8; 8];
    len8.copy_from_slice(&bytes[8..16]);
    let hlen = usize::try_from(u64::from_le_bytes(len8)).map_err(|_| corrupt("header length overflows".into()))?;
    let hjson = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(hjson).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "header version {} disagrees with file version {version}",
                header.format_version
            ),
        });
    }
    let mut pos = 16 + hlen;
    let mut loaded = std::collections::HashMap::new();
    for entry in &header.tensors {
        let t = decode_f64_at(bytes, &mut pos).map_err(|m| corrupt(format!("tensor '{}': {m}", entry.name)))?;
        if t.dims != entry.shape {
            return Err(Error::shape(
                format!("checkpoint tensor '{}'", entry.name),
                format!("{:?}", entry.shape),
                format!("{:?}", t.dims),
            ));
        }
        loaded.insert(entry.name.clone(), t);
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
        let t = loaded.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("missing tensor '{name}'"),
        })?;
        if t.dims != shape {
            return Err(Error::shape(
                format!("checkpoint tensor '{name}'"),
                format!("{shape:?}"),
                format!("{:?}", t.dims),
            ));
        }
        Ok(t.data)
    };
    let (i, h, o) = (header.input_dim, header.hidden_dim, header.output_dim);
    let w1 = DenseMatrix::from_vec(h, i, take("w1", vec![h, i])?)?;
    let b1 = take("b1", vec![h])?;
    let w2 = DenseMatrix::from_vec(o, h, take("w2", vec![o, h])?)?;
    let b2 = take("b2", vec![o])?;
    let norm = InputNorm {
        shift: take("norm_shift", vec![i])?,
        scale: take("norm_scale", vec![i])?,
    };
    let mlp = MlpParams::from_parts(w1, b1, w2, b2)?;
    let model = match header.kind {
        ModelKind::Mdn => {
            let k = header.k.ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: "MDN header lacks K".into(),
            })?;
            let floor = header.var_floor.unwrap_or(crate::ambiguity::mdn::VARIANCE_FLOOR);
            Model::Mdn(MdnModel::new(mlp, k, norm, floor)?)
        }
        ModelKind::Margin => {
            let m = MarginModel { mlp, norm };
            m.validate()?;
            Model::Margin(m)
        }
    };
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn load_mdn(path: &Path) -> Result<(MdnModel, CheckpointHeader)> {
    match load_checkpoint(path)? {
        (Model::Mdn(m), h) => Ok((m, h)),
        _ => Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "expected an MDN checkpoint".into(),
        }),
    }
}

pub fn load_margin(path: &Path) -> Result<(MarginModel, CheckpointHeader)> {
    match load_checkpoint(path)? {
        (Model::Margin(m), h) => Ok((m, h)),
        _ => Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "expected a margin-predictor checkpoint".into(),
        }),
    }
}

/// Hex SHA-256 of a file, used to identify models in reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
