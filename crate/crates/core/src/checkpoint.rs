//! Model checkpoints: a little-endian `u32` header length, a JSON header and
//! a block of little-endian `f32` parameters.
//!
//! ```text
//! [len: u32 LE][header JSON, len bytes][params: f32 LE x param_count]
//! ```
//!
//! The header records the schema (`policy/1` or `cvae/1`), the layer widths
//! of every network in parameter order, and a SHA-256 of the parameter block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::CvaeModel;
use crate::error::{Error, Result};
use crate::nn::{param_count, Mlp, MlpPolicy};
use crate::scalar::Scalar;

pub const POLICY_SCHEMA: &str = "policy/1";
pub const CVAE_SCHEMA: &str = "cvae/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: String,
    /// Widths of each network, in the order their parameters are stored.
    pub widths: Vec<Vec<usize>>,
    pub seed: u64,
    pub trained_steps: u64,
    pub param_count: usize,
    pub sha256: String,
    /// Free-form metadata such as the observation layout.
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Caller-provided part of a header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub trained_steps: u64,
    pub meta: serde_json::Value,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_checkpoint(path: &Path, schema: &str, widths: Vec<Vec<usize>>, params: &[f32], info: &CheckpointInfo) -> Result<()> {
    let block: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let header = CheckpointHeader {
        schema: schema.to_string(),
        widths,
        seed: info.seed,
        trained_steps: info.trained_steps,
        param_count: params.len(),
        sha256: digest(&block),
        meta: info.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(4 + json.len() + block.len());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&block);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint whose schema must equal `schema`.
pub fn read_checkpoint(path: &Path, schema: &str) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(corrupt("truncated header length".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let json = bytes
        .get(4..4 + len)
        .ok_or_else(|| corrupt(format!("header of {len} bytes exceeds file")))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.schema != schema {
        return Err(Error::Schema {
            expected: schema.to_string(),
            found: header.schema,
        });
    }
    let block = &bytes[4 + len..];
    if block.len() != header.param_count * 4 {
        return Err(corrupt(format!(
            "parameter block has {} bytes, header declares {} parameters",
            block.len(),
            header.param_count
        )));
    }
    let expected: usize = header.widths.iter().map(|w| param_count(w)).sum();
    if expected != header.param_count {
        return Err(corrupt(format!("widths imply {expected} parameters, header declares {}", header.param_count)));
    }
    if digest(block) != header.sha256 {
        return Err(corrupt("parameter checksum mismatch".into()));
    }
    let params = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

fn split_networks<T: Scalar>(widths: &[Vec<usize>], params: &[f32], n: usize) -> Result<Vec<Mlp<T>>> {
    if widths.len() != n {
        return Err(Error::Config(format!("expected {n} networks, checkpoint has {}", widths.len())));
    }
    let mut nets = Vec::with_capacity(n);
    let mut off = 0;
    for w in widths {
        let k = param_count(w);
        let p = params[off..off + k].iter().map(|&x| <T as Scalar>::from_f32(x)).collect();
        nets.push(Mlp::from_params(w, p)?);
        off += k;
    }
    Ok(nets)
}

fn to_f32<T: Scalar>(xs: &[T]) -> impl Iterator<Item = f32> + '_ {
    xs.iter().map(|x| x.as_f32())
}

pub fn save_policy<T: Scalar>(policy: &MlpPolicy<T>, path: &Path, info: &CheckpointInfo) -> Result<()> {
    let params: Vec<f32> = to_f32(policy.actor.params()).chain(to_f32(policy.critic.params())).collect();
    let widths = vec![policy.actor.widths().to_vec(), policy.critic.widths().to_vec()];
    write_checkpoint(path, POLICY_SCHEMA, widths, &params, info)
}

pub fn load_policy<T: Scalar>(path: &Path) -> Result<(MlpPolicy<T>, CheckpointHeader)> {
    let (header, params) = read_checkpoint(path, POLICY_SCHEMA)?;
    let mut nets = split_networks::<T>(&header.widths, &params, 2)?;
    let critic = nets.pop().unwrap();
    let actor = nets.pop().unwrap();
    if actor.input_dim() != critic.input_dim() {
        return Err(Error::Config("actor and critic input widths differ".into()));
    }
    Ok((MlpPolicy { actor, critic }, header))
}

#[derive(Serialize, Deserialize)]
struct CvaeMeta {
    n_h: usize,
    state_dim: usize,
}

/// Saves a cVAE; `n_h` and the state width are stored under `meta.cvae`.
pub fn save_cvae<T: Scalar>(model: &CvaeModel<T>, path: &Path, info: &CheckpointInfo) -> Result<()> {
    let params: Vec<f32> = to_f32(model.encoder.params()).chain(to_f32(model.decoder.params())).collect();
    let widths = vec![model.encoder.widths().to_vec(), model.decoder.widths().to_vec()];
    let mut info = info.clone();
    let meta = serde_json::to_value(CvaeMeta {
        n_h: model.n_h,
        state_dim: model.state_dim,
    })?;
    match &mut info.meta {
        serde_json::Value::Object(m) => {
            m.insert("cvae".into(), meta);
        }
        other => *other = serde_json::json!({ "cvae": meta }),
    }
    write_checkpoint(path, CVAE_SCHEMA, widths, &params, &info)
}

pub fn load_cvae<T: Scalar>(path: &Path) -> Result<(CvaeModel<T>, CheckpointHeader)> {
    let (header, params) = read_checkpoint(path, CVAE_SCHEMA)?;
    let meta: CvaeMeta = serde_json::from_value(header.meta.get("cvae").cloned().unwrap_or_default()).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("cvae metadata: {e}"),
    })?;
    let mut nets = split_networks::<T>(&header.widths, &params, 2)?;
    let decoder = nets.pop().unwrap();
    let encoder = nets.pop().unwrap();
    Ok((CvaeModel::from_parts(encoder, decoder, meta.n_h, meta.state_dim)?, header))
}
