//! Checkpoint files: `NRCKPT01`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyDims, PolicyParams, Weights, TENSOR_NAMES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NRCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// Run position recorded alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub global_step: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dims: PolicyDims,
    tensors: Vec<TensorEntry>,
    global_step: usize,
    rng_state: RngState,
    frozen_checksum: String,
}

/// All randomness is derived from the master seed and the step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    master_seed: u64,
    next_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub meta: CheckpointMeta,
}

fn shapes(d: &PolicyDims) -> [(&'static str, Vec<usize>); 5] {
    [
        ("frozen_proj", vec![d.features, d.pixels()]),
        (TENSOR_NAMES[0], vec![d.hidden, d.input()]),
        (TENSOR_NAMES[1], vec![d.hidden]),
        (TENSOR_NAMES[2], vec![d.vocab, d.hidden]),
        (TENSOR_NAMES[3], vec![d.vocab]),
    ]
}

pub fn encode_checkpoint(params: &PolicyParams, meta: CheckpointMeta) -> Vec<u8> {
    let data: [&[f64]; 5] = [
        params.frozen_proj(),
        &params.weights.w1,
        &params.weights.b1,
        &params.weights.w2,
        &params.weights.b2,
    ];
    let mut offset = 0;
    let tensors = shapes(&params.dims)
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += shape.iter().product::<usize>() * 8;
            e
        })
        .collect();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dims: params.dims,
        tensors,
        global_step: meta.global_step,
        rng_state: RngState {
            master_seed: meta.master_seed,
            next_step: meta.global_step + 1,
        },
        frozen_checksum: format!("{:016x}", params.frozen_checksum()),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in data {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blob = &bytes[16 + mlen..];
    let expected = shapes(&manifest.dims);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Format("unexpected tensor list".into()));
    }
    let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(expected) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = blob
            .get(entry.offset..entry.offset + n * 8)
            .ok_or_else(|| Error::Format(format!("tensor {name} out of bounds")))?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    let mut it = tensors.into_iter();
    let frozen = it.next().expect("five tensors");
    let weights = Weights {
        w1: it.next().expect("five tensors"),
        b1: it.next().expect("five tensors"),
        w2: it.next().expect("five tensors"),
        b2: it.next().expect("five tensors"),
    };
    let params = PolicyParams::from_parts(manifest.dims, frozen, weights)?;
    if format!("{:016x}", params.frozen_checksum()) != manifest.frozen_checksum {
        return Err(Error::Format("frozen projection checksum mismatch".into()));
    }
    Ok(Checkpoint {
        params,
        meta: CheckpointMeta {
            global_step: manifest.global_step,
            master_seed: manifest.rng_state.master_seed,
        },
    })
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, meta: CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
