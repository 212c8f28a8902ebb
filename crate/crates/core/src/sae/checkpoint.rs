//! SAE checkpoint files.
//!
//! ```text
//! "SAEC" | header_len: u32 LE | header JSON | f64 LE blocks
//! ```
//!
//! Section offsets in the header are byte offsets from the start of the
//! block region (the first byte after the header).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{Activation, SaeParams};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEC";
pub const CHECKPOINT_FORMAT: &str = "sae-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub init_seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub train_config: Option<TrainConfig>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub d: usize,
    pub k: usize,
    pub activation: Activation,
    pub lambda: f64,
    pub p_norm: u8,
    pub meta: CheckpointMeta,
    pub sections: Vec<Section>,
}

pub fn save_checkpoint(path: &Path, params: &SaeParams, meta: &CheckpointMeta) -> Result<()> {
    params.validate()?;
    let mut blocks: Vec<(&str, Vec<usize>, Vec<f64>)> = vec![
        ("w_enc", vec![params.k(), params.d()], params.w_enc.iter().copied().collect()),
        ("b_enc", vec![params.k()], params.b_enc.to_vec()),
        ("w_dec", vec![params.d(), params.k()], params.w_dec.iter().copied().collect()),
        ("b_dec", vec![params.d()], params.b_dec.to_vec()),
    ];
    if let Some(theta) = &params.theta {
        blocks.push(("theta", vec![params.k()], theta.to_vec()));
    }
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in &blocks {
        sections.push(Section { name: name.to_string(), offset: payload.len() as u64, shape: shape.clone() });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        crate_version: crate::VERSION.into(),
        d: params.d(),
        k: params.k(),
        activation: params.activation,
        lambda: params.lambda,
        p_norm: params.p_norm(),
        meta: meta.clone(),
        sections,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SaeParams, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |r: &str| Error::Corrupt { path: path.into(), reason: r.into() };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(corrupt("unknown format"));
    }
    let payload = &bytes[8 + hlen..];
    let read = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let s = header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| corrupt(&format!("missing section {name}")))?;
        let len: usize = s.shape.iter().product();
        let start = s.offset as usize;
        let end = start + 8 * len;
        if end > payload.len() {
            return Err(corrupt(&format!("section {name} out of bounds")));
        }
        let v = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((s.shape.clone(), v))
    };
    let mat = |name: &str| -> Result<Array2<f64>> {
        let (shape, v) = read(name)?;
        if shape.len() != 2 {
            return Err(corrupt(&format!("section {name} is not a matrix")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| corrupt(&e.to_string()))
    };
    let vec = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(read(name)?.1)) };
    let theta = if matches!(header.activation, Activation::Jumprelu { .. }) { Some(vec("theta")?) } else { None };
    let params = SaeParams {
        w_enc: mat("w_enc")?,
        b_enc: vec("b_enc")?,
        w_dec: mat("w_dec")?,
        b_dec: vec("b_dec")?,
        theta,
        activation: header.activation,
        lambda: header.lambda,
    };
    params.validate().map_err(|e| corrupt(&e.to_string()))?;
    if params.d() != header.d || params.k() != header.k {
        return Err(corrupt("header dimensions disagree with sections"));
    }
    Ok((params, header))
}
