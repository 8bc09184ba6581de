//! Recorded rollout batches for offline replay (gradient attribution and
//! diversity recomputation).
//!
//! Layout follows the checkpoint convention: `NRREPL01`, a little-endian
//! `u64` manifest length, the JSON manifest, then raster pixels as
//! little-endian `f64` at the byte offsets listed in the manifest.

use serde::{Deserialize, Serialize};

use super::{ConditionMode, RolloutGroup};
use crate::env::{Token, TaskInstance};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Source, Trajectory};
use crate::raster::Raster;

const MAGIC: &[u8; 8] = b"NRREPL01";

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayGroup {
    pub query_shape: usize,
    pub truth: usize,
    pub instance_seed: u64,
    pub alpha: f64,
    pub condition_mode: ConditionMode,
    pub tokens: Vec<Vec<Token>>,
    pub sources: Vec<Source>,
    pub rewards: Vec<f64>,
    /// Pooled advantages as computed during the original run.
    pub advantages: Vec<f64>,
    pub clean: Raster,
    /// Present only when noisy trajectories were scored on it.
    pub distorted: Option<Raster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    /// Index of the update this batch fed (1-based).
    pub step: usize,
    pub groups: Vec<ReplayGroup>,
}

impl ReplayStep {
    pub fn from_groups(step: usize, groups: &[RolloutGroup]) -> Self {
        let groups = groups
            .iter()
            .map(|g| ReplayGroup {
                query_shape: g.instance.query_shape,
                truth: g.instance.truth,
                instance_seed: g.instance.seed,
                alpha: g.alpha,
                condition_mode: g.condition_mode,
                tokens: g.trajectories.iter().map(|t| t.tokens.clone()).collect(),
                sources: g.trajectories.iter().map(|t| t.source).collect(),
                rewards: g.rewards.clone(),
                advantages: g.advantages.clone(),
                clean: g.instance.image.clone(),
                distorted: (g.condition_mode == ConditionMode::OnSource)
                    .then(|| g.distorted.clone()),
            })
            .collect();
        Self { step, groups }
    }

    /// Rebuild groups with old log-probs evaluated at `params`, keeping the
    /// recorded advantages.
    pub fn to_groups(&self, params: &PolicyParams) -> Result<Vec<RolloutGroup>> {
        self.groups
            .iter()
            .map(|g| {
                let instance = TaskInstance {
                    image: g.clean.clone(),
                    query_shape: g.query_shape,
                    truth: g.truth,
                    seed: g.instance_seed,
                };
                let distorted = g.distorted.clone().unwrap_or_else(|| g.clean.clone());
                let clean_ctx = params.context(&instance.image, g.query_shape)?;
                let noisy_ctx = params.context(&distorted, g.query_shape)?;
                let trajectories: Vec<Trajectory> = g
                    .tokens
                    .iter()
                    .zip(&g.sources)
                    .map(|(toks, &source)| Trajectory {
                        tokens: toks.clone(),
                        old_logprobs_gen: Vec::new(),
                        source,
                        gen_strength: if source == Source::Noisy { g.alpha } else { 0.0 },
                    })
                    .collect();
                let old_logprobs = trajectories
                    .iter()
                    .map(|t| match (g.condition_mode, t.source) {
                        (ConditionMode::OnSource, Source::Noisy) => {
                            params.logprobs_with(&noisy_ctx, &t.tokens)
                        }
                        _ => params.logprobs_with(&clean_ctx, &t.tokens),
                    })
                    .collect();
                Ok(RolloutGroup {
                    instance,
                    distorted,
                    alpha: g.alpha,
                    trajectories,
                    rewards: g.rewards.clone(),
                    shaped_rewards: g.rewards.clone(),
                    advantages: g.advantages.clone(),
                    old_logprobs,
                    condition_mode: g.condition_mode,
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RasterRef {
    width: usize,
    height: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct GroupManifest {
    query_shape: usize,
    truth: usize,
    instance_seed: u64,
    alpha: f64,
    condition_mode: ConditionMode,
    tokens: Vec<Vec<Token>>,
    sources: Vec<Source>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    clean: RasterRef,
    distorted: Option<RasterRef>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: usize,
    groups: Vec<GroupManifest>,
}

pub fn encode_replay(step: &ReplayStep) -> Vec<u8> {
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |r: &Raster| {
        let rr = RasterRef {
            width: r.width(),
            height: r.height(),
            offset: blob.len(),
        };
        for v in r.pixels() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        rr
    };
    let groups = step
        .groups
        .iter()
        .map(|g| GroupManifest {
            query_shape: g.query_shape,
            truth: g.truth,
            instance_seed: g.instance_seed,
            alpha: g.alpha,
            condition_mode: g.condition_mode,
            tokens: g.tokens.clone(),
            sources: g.sources.clone(),
            rewards: g.rewards.clone(),
            advantages: g.advantages.clone(),
            clean: push(&g.clean),
            distorted: g.distorted.as_ref().map(&mut push),
        })
        .collect();
    let json = serde_json::to_vec(&Manifest {
        version: 1,
        step: step.step,
        groups,
    })
    .expect("replay manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_replay(bytes: &[u8]) -> Result<ReplayStep> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a replay file".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Format("truncated replay manifest".into()))?;
    let m: Manifest = serde_json::from_slice(json)?;
    let blob = &bytes[16 + mlen..];
    let raster = |r: &RasterRef| -> Result<Raster> {
        let n = r.width * r.height;
        let raw = blob
            .get(r.offset..r.offset + 8 * n)
            .ok_or_else(|| Error::Format("raster out of bounds in replay".into()))?;
        Raster::from_pixels(
            r.width,
            r.height,
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )
    };
    let groups = m
        .groups
        .iter()
        .map(|g| {
            if g.tokens.len() != g.sources.len() || g.tokens.len() != g.advantages.len() {
                return Err(Error::Format("replay group lengths disagree".into()));
            }
            Ok(ReplayGroup {
                query_shape: g.query_shape,
                truth: g.truth,
                instance_seed: g.instance_seed,
                alpha: g.alpha,
                condition_mode: g.condition_mode,
                tokens: g.tokens.clone(),
                sources: g.sources.clone(),
                rewards: g.rewards.clone(),
                advantages: g.advantages.clone(),
                clean: raster(&g.clean)?,
                distorted: g.distorted.as_ref().map(raster).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplayStep {
        step: m.step,
        groups,
    })
}
