//! Binary checkpoint format: the 8-byte magic `PCALNET1`, a little-endian `u32` length, a
//! UTF-8 JSON header describing every tensor, then the tensors as little-endian `f32` in
//! header order.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{layer_shapes, Dense, ModelParams, LAYER_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCALNET1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
    rng_seed: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

fn expected_tensors(num_classes: usize) -> Vec<TensorInfo> {
    LAYER_NAMES
        .iter()
        .zip(layer_shapes(num_classes))
        .flat_map(|(name, (fan_in, fan_out))| {
            [
                TensorInfo {
                    name: format!("{name}.weight"),
                    shape: vec![fan_in, fan_out],
                },
                TensorInfo {
                    name: format!("{name}.bias"),
                    shape: vec![fan_out],
                },
            ]
        })
        .collect()
}

pub fn save_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let header = Header {
        num_classes: params.num_classes(),
        rng_seed: params.rng_seed(),
        tensors: expected_tensors(params.num_classes()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + params.parameter_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&params.to_bytes());
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC.as_slice())
        .ok_or_else(|| Error::format("bad checkpoint magic"))?;
    if rest.len() < 4 {
        return Err(Error::format("truncated checkpoint header length"));
    }
    let (len, rest) = rest.split_at(4);
    let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
    if rest.len() < len {
        return Err(Error::format("truncated checkpoint header"));
    }
    let (json, payload) = rest.split_at(len);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if !(2..=u16::MAX as usize).contains(&header.num_classes) {
        return Err(Error::format(format!("invalid class count {}", header.num_classes)));
    }
    if header.tensors != expected_tensors(header.num_classes) {
        return Err(Error::format("tensor layout does not match the network architecture"));
    }
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected * 4 {
        return Err(Error::format(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 4
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for (fan_in, fan_out) in layer_shapes(header.num_classes) {
        let w = Array2::from_shape_vec((fan_in, fan_out), take(fan_in * fan_out)).expect("sized");
        let b = Array1::from_vec(take(fan_out));
        layers.push(Dense { w, b });
    }
    let mut it = layers.into_iter();
    let mut next = || it.next().expect("nine layers");
    let tnet = [next(), next(), next(), next()];
    let backbone = [next(), next(), next()];
    let seg = next();
    let head = next();
    let params = ModelParams::from_parts(tnet, backbone, seg, head, header.rng_seed);
    if !params.is_finite() {
        return Err(Error::format("checkpoint contains non-finite parameters"));
    }
    Ok(params)
}
