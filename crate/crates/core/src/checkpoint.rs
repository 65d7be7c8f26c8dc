//! Model checkpoint files.
//!
//! Layout (little-endian): magic `FNCA`, version u16, then the model config as
//! `channels u32, c_in u32, c_out u32, hidden_units u32, t0 u32, t1 u32,
//! fire_rate f64, downscale_factor u32, eta f64, grad_reduction u8`, then the
//! flattened weights as f32 in flatten order. The weight count is implied by
//! the config.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nca::{flatten, unflatten, GradReduction, ModelConfig, TwoStageModel};

const MAGIC: &[u8; 4] = b"FNCA";
const VERSION: u16 = 1;
pub const CHECKPOINT_HEADER_BYTES: usize = 4 + 2 + 6 * 4 + 8 + 4 + 8 + 1;

fn u32_of(v: usize, field: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::precondition(format!("model.{field} does not fit a checkpoint")))
}

pub fn encode_checkpoint(model: &TwoStageModel<f32>) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_BYTES + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, name) in [
        (c.channels, "channels"),
        (c.c_in, "c_in"),
        (c.c_out, "c_out"),
        (c.hidden_units, "hidden_units"),
        (c.t0, "t0"),
        (c.t1, "t1"),
    ] {
        out.extend_from_slice(&u32_of(v, name)?);
    }
    out.extend_from_slice(&c.fire_rate.to_le_bytes());
    out.extend_from_slice(&u32_of(c.downscale_factor, "downscale_factor")?);
    out.extend_from_slice(&c.eta.to_le_bytes());
    out.push(c.grad_reduction.code());
    for w in flatten(model) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TwoStageModel<f32>> {
    if bytes.len() < CHECKPOINT_HEADER_BYTES {
        return Err(Error::format("checkpoint shorter than its header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let config = ModelConfig {
        channels: u32_at(6),
        c_in: u32_at(10),
        c_out: u32_at(14),
        hidden_units: u32_at(18),
        t0: u32_at(22),
        t1: u32_at(26),
        fire_rate: f64_at(30),
        downscale_factor: u32_at(38),
        eta: f64_at(42),
        grad_reduction: GradReduction::from_code(bytes[50])?,
    };
    config.validate_allowing_empty_stages()?;
    let body = &bytes[CHECKPOINT_HEADER_BYTES..];
    if body.len() != 4 * config.param_count() {
        return Err(Error::format(format!(
            "checkpoint holds {} weight bytes, config needs {}",
            body.len(),
            4 * config.param_count()
        )));
    }
    let weights: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    unflatten(&weights, &config)
}

pub fn save_checkpoint(path: &Path, model: &TwoStageModel<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TwoStageModel<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
