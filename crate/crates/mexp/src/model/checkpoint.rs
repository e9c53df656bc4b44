//! Checkpoint file format.
//!
//! Layout: magic "MEXP1", u32 LE header length, JSON header (config, epoch,
//! optimizer hyperparameters and step, RNG position), then three sections of
//! raw little-endian f32 arrays in the fixed parameter order of
//! `Params::tensors`: parameters, Adam first moments, Adam second moments.

use super::{AdamHyper, AdamState, Model, ModelConfig, Params};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MEXP1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub epoch: u64,
    pub adam: AdamHyper,
    pub adam_step: u64,
    /// Data-stream position: draws are counter-keyed by epoch, so resuming
    /// only needs the epoch index.
    pub rng_position: u64,
    pub param_count: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    pub epoch: u64,
    pub rng_position: u64,
}

fn param_count(config: &ModelConfig) -> u64 {
    Params::<f32>::zeros(config)
        .tensors()
        .iter()
        .map(|(_, t)| t.len() as u64)
        .sum()
}

fn write_section(out: &mut Vec<u8>, params: &Params<f32>) {
    for (_, t) in params.tensors() {
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_section(bytes: &[u8], pos: &mut usize, config: &ModelConfig) -> Result<Params<f32>> {
    let mut params = Params::<f32>::zeros(config);
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            let end = *pos + 4;
            let chunk = bytes.get(*pos..end).ok_or(Error::Format {
                what: "checkpoint",
                detail: "truncated parameter section".into(),
            })?;
            *x = f32::from_le_bytes(chunk.try_into().unwrap());
            *pos = end;
        }
    }
    Ok(params)
}

pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: ckpt.model.config.clone(),
        epoch: ckpt.epoch,
        adam: ckpt.opt.hyper,
        adam_step: ckpt.opt.step,
        rng_position: ckpt.rng_position,
        param_count: param_count(&ckpt.model.config),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_section(&mut out, &ckpt.model.params);
    write_section(&mut out, &ckpt.opt.m);
    write_section(&mut out, &ckpt.opt.v);
    Ok(out)
}

/// Parse checkpoint bytes, rejecting magic/version/shape mismatches.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing MEXP1 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let hend = 9usize.checked_add(hlen).ok_or_else(|| bad("header length overflow".into()))?;
    if bytes.len() < hend {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[9..hend]).map_err(|e| bad(e.to_string()))?;
    header.config.validate()?;
    let count = param_count(&header.config);
    if header.param_count != count {
        return Err(bad(format!(
            "param count {} does not match config ({count})",
            header.param_count
        )));
    }
    let want = hend as u64 + 3 * 4 * count;
    if bytes.len() as u64 != want {
        return Err(bad(format!("file is {} bytes, expected {want}", bytes.len())));
    }
    let mut pos = hend;
    let params = read_section(bytes, &mut pos, &header.config)?;
    let m = read_section(bytes, &mut pos, &header.config)?;
    let v = read_section(bytes, &mut pos, &header.config)?;
    if !params.is_finite() {
        return Err(bad("non-finite parameter value".into()));
    }
    Ok(Checkpoint {
        model: Model { config: header.config.clone(), params },
        opt: AdamState { m, v, step: header.adam_step, hyper: header.adam },
        epoch: header.epoch,
        rng_position: header.rng_position,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = serialize_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
