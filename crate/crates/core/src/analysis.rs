//! Offline analyses over finished runs: rollout diversity, subgroup gradient
//! attribution, and Bradley–Terry aggregation of pairwise comparisons.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::env::Token;
use crate::error::{Error, Result};
use crate::grpo::{update_step_masked, LossMask, OptimizerState, ReplayStep, TrainConfig};
use crate::policy::{Checkpoint, PolicyParams, TENSOR_NAMES};

pub const EMBED_DIM: usize = 256;
pub const HASH_SEED: u64 = 0x6e72_2d67_6c79_7105;

/// Default tensors entering gradient comparisons.
pub const DEFAULT_SELECTION: [&str; 4] = ["W2", "b2", "W1", "b1"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEmbedding {
    pub vector: Vec<f64>,
}

impl TrajectoryEmbedding {
    pub fn cosine(&self, other: &TrajectoryEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

fn ngram_hash(gram: &[Token], seed: u64) -> u64 {
    let mut h = mix(seed ^ gram.len() as u64);
    for t in gram {
        h = mix(h ^ (t.id() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

/// Signed feature hashing of all 1-, 2- and 3-grams, L2-normalised.
pub fn embed_trajectory(tokens: &[Token]) -> TrajectoryEmbedding {
    embed_with_seed(tokens, HASH_SEED)
}

/// [`embed_trajectory`] with an explicit hash seed.
pub fn embed_with_seed(tokens: &[Token], seed: u64) -> TrajectoryEmbedding {
    let mut v = vec![0.0; EMBED_DIM];
    for n in 1..=3 {
        for gram in tokens.windows(n) {
            let h = ngram_hash(gram, seed);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % EMBED_DIM as u64) as usize] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    TrajectoryEmbedding { vector: v }
}

/// Mean pairwise cosine distance between precomputed embeddings.
pub fn diversity_of_embeddings(embs: &[TrajectoryEmbedding]) -> Result<f64> {
    let k = embs.len();
    if k < 2 {
        return Err(Error::Validation(format!(
            "diversity needs at least 2 trajectories, got {k}"
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += 1.0 - embs[i].cosine(&embs[j]);
        }
    }
    let d = total / (k * (k - 1) / 2) as f64;
    Ok(d.clamp(0.0, 2.0))
}

/// Mean over unordered pairs of `1 - cos`.
pub fn diversity<T: AsRef<[Token]>>(trajectories: &[T]) -> Result<f64> {
    let embs: Vec<_> = trajectories
        .iter()
        .map(|t| embed_trajectory(t.as_ref()))
        .collect();
    diversity_of_embeddings(&embs)
}

fn check_selection(selection: &[&str]) -> Result<()> {
    if selection.is_empty() {
        return Err(Error::Validation("empty tensor selection".into()));
    }
    for s in selection {
        if !TENSOR_NAMES.contains(s) {
            return Err(Error::Validation(format!("unknown tensor {s:?}")));
        }
    }
    Ok(())
}

fn check_compatible(a: &PolicyParams, b: &PolicyParams) -> Result<()> {
    if a.dims != b.dims || !a.weights.same_shape(&b.weights) {
        return Err(Error::Validation("checkpoint dimensions differ".into()));
    }
    if a.frozen_checksum() != b.frozen_checksum() {
        return Err(Error::Validation(
            "checkpoints use different frozen projections".into(),
        ));
    }
    Ok(())
}

/// `b - a` over the selected tensors, concatenated in selection order.
pub fn param_delta(a: &PolicyParams, b: &PolicyParams, selection: &[&str]) -> Result<Vec<f64>> {
    check_selection(selection)?;
    check_compatible(a, b)?;
    let mut out = Vec::new();
    for name in selection {
        let ta = a.weights.tensor(name).expect("checked name");
        let tb = b.weights.tensor(name).expect("checked name");
        out.extend(ta.iter().zip(tb).map(|(x, y)| y - x));
    }
    Ok(out)
}

pub fn anchor_gradient(a: &Checkpoint, b: &Checkpoint, selection: &[&str]) -> Result<Vec<f64>> {
    param_delta(&a.params, &b.params, selection)
}

/// Replay the recorded batches from `start` with one subgroup's loss terms
/// zeroed, and return the parameter displacement.
///
/// Advantages come from the replay untouched; old log-probs are recomputed at
/// the replayed parameters before each step. Optimizer state starts fresh.
pub fn subgroup_gradient(
    start: &Checkpoint,
    replay: &[ReplayStep],
    mask: LossMask,
    cfg: &TrainConfig,
    runs: usize,
    selection: &[&str],
) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::Validation("runs must be at least 1".into()));
    }
    if replay.is_empty() {
        return Err(Error::Validation("empty replay".into()));
    }
    let t0 = start.meta.global_step;
    for (k, r) in replay.iter().enumerate() {
        if r.step != t0 + k + 1 {
            return Err(Error::Validation(format!(
                "replay step {} does not follow checkpoint step {} at offset {}",
                r.step, t0, k
            )));
        }
    }
    let mut acc: Option<Vec<f64>> = None;
    for _ in 0..runs {
        let mut params = start.params.clone();
        let mut opt = OptimizerState::new(cfg.optimizer, &params);
        for r in replay {
            let groups = r.to_groups(&params)?;
            update_step_masked(&mut params, &mut opt, &groups, cfg, mask)
                .map_err(|e| e.at_step(r.step))?;
        }
        let d = param_delta(&start.params, &params, selection)?;
        match acc.as_mut() {
            None => acc = Some(d),
            Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
        }
    }
    let mut g = acc.expect("runs >= 1");
    g.iter_mut().for_each(|x| *x /= runs as f64);
    Ok(g)
}

pub fn projection_ratio(g_sub: &[f64], anchor: &[f64]) -> Result<f64> {
    if g_sub.len() != anchor.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} vs {}",
            g_sub.len(),
            anchor.len()
        )));
    }
    let nn: f64 = anchor.iter().map(|a| a * a).sum();
    if nn == 0.0 || !nn.is_finite() {
        return Err(Error::Validation("anchor gradient is zero".into()));
    }
    Ok(g_sub.iter().zip(anchor).map(|(g, a)| g * a).sum::<f64>() / nn)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub t: usize,
    pub delta_t: usize,
    pub anchor: Vec<f64>,
    pub g_clean: Vec<f64>,
    pub g_noisy: Vec<f64>,
    pub r_clean: f64,
    pub r_noisy: f64,
    pub runs: usize,
}

/// Anchor and both subgroup gradients between two checkpoints.
pub fn grad_report(
    a: &Checkpoint,
    b: &Checkpoint,
    replay: &[ReplayStep],
    cfg: &TrainConfig,
    runs: usize,
    selection: &[&str],
) -> Result<GradReport> {
    let t = a.meta.global_step;
    let delta_t = b
        .meta
        .global_step
        .checked_sub(t)
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::Validation("checkpoints out of order".into()))?;
    if replay.len() != delta_t {
        return Err(Error::Validation(format!(
            "need replay for steps {}..={}, got {} batches",
            t + 1,
            t + delta_t,
            replay.len()
        )));
    }
    let anchor = anchor_gradient(a, b, selection)?;
    let g_clean = subgroup_gradient(a, replay, LossMask::CleanOnly, cfg, runs, selection)?;
    let g_noisy = subgroup_gradient(a, replay, LossMask::NoisyOnly, cfg, runs, selection)?;
    let r_clean = projection_ratio(&g_clean, &anchor)?;
    let r_noisy = projection_ratio(&g_noisy, &anchor)?;
    Ok(GradReport {
        t,
        delta_t,
        anchor,
        g_clean,
        g_noisy,
        r_clean,
        r_noisy,
        runs,
    })
}

/// JSON form: `"first"`, `"second"` or `"tie"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[serde(rename = "first", alias = "first_wins")]
    FirstWins,
    #[serde(rename = "second", alias = "second_wins")]
    SecondWins,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    pub outcome: Outcome,
}

impl Comparison {
    pub fn new(first: impl Into<String>, second: impl Into<String>, outcome: Outcome) -> Self {
        Self {
            first: first.into(),
            second: second.into(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BtFit {
    /// Sorted model ids.
    pub models: Vec<String>,
    /// Log-strengths with `sum(exp(strengths)) == 1`.
    pub strengths: Vec<f64>,
    pub iterations: usize,
}

impl BtFit {
    fn index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == id)
    }

    pub fn strength(&self, id: &str) -> Option<f64> {
        self.index(id).map(|i| self.strengths[i])
    }

    /// `P(a beats b)`.
    pub fn win_prob(&self, a: &str, b: &str) -> Option<f64> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        Some(win_prob(self.strengths[i], self.strengths[j]))
    }

    /// Row-major `P(models[i] beats models[j])`.
    pub fn win_matrix(&self) -> Vec<Vec<f64>> {
        self.strengths
            .iter()
            .map(|&a| self.strengths.iter().map(|&b| win_prob(a, b)).collect())
            .collect()
    }
}

fn win_prob(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.5;
    }
    // logistic of the difference, stable for large gaps and -inf strengths
    let d = a - b;
    if d.is_nan() {
        0.5
    } else {
        1.0 / (1.0 + (-d).exp())
    }
}

pub const BT_TOL: f64 = 1e-10;
pub const BT_MAX_ITERS: usize = 10_000;

/// Maximum-likelihood Bradley–Terry strengths by minorisation–maximisation.
/// A tie counts as half a win for each side.
pub fn bt_fit(comparisons: &[Comparison]) -> Result<BtFit> {
    if comparisons.is_empty() {
        return Err(Error::Validation("no comparisons".into()));
    }
    let models: Vec<String> = comparisons
        .iter()
        .flat_map(|c| [c.first.clone(), c.second.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let idx: BTreeMap<&str, usize> = models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i))
        .collect();
    let m = models.len();
    let mut wins = vec![0.0; m];
    let mut games = vec![vec![0.0; m]; m];
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for c in comparisons {
        let (i, j) = (idx[c.first.as_str()], idx[c.second.as_str()]);
        if i == j {
            return Err(Error::Validation(format!("{} compared with itself", c.first)));
        }
        match c.outcome {
            Outcome::FirstWins => wins[i] += 1.0,
            Outcome::SecondWins => wins[j] += 1.0,
            Outcome::Tie => {
                wins[i] += 0.5;
                wins[j] += 0.5;
            }
        }
        games[i][j] += 1.0;
        games[j][i] += 1.0;
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        parent[ri] = rj;
    }
    let root = find(&mut parent, 0);
    if (1..m).any(|i| find(&mut parent, i) != root) {
        return Err(Error::Validation("comparison graph is disconnected".into()));
    }
    let uniform = vec![-(m as f64).ln(); m];
    if comparisons.iter().all(|c| c.outcome == Outcome::Tie) {
        return Ok(BtFit {
            models,
            strengths: uniform,
            iterations: 0,
        });
    }
    let mut p = vec![1.0 / m as f64; m];
    let mut beta = uniform;
    let mut iterations = 0;
    while iterations < BT_MAX_ITERS {
        iterations += 1;
        let mut next: Vec<f64> = (0..m)
            .map(|i| {
                let denom: f64 = (0..m)
                    .filter(|&j| games[i][j] > 0.0)
                    .map(|j| games[i][j] / (p[i] + p[j]))
                    .sum();
                wins[i] / denom
            })
            .collect();
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let next_beta: Vec<f64> = next.iter().map(|x| x.ln()).collect();
        let change = beta
            .iter()
            .zip(&next_beta)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max);
        p = next;
        beta = next_beta;
        if change < BT_TOL {
            break;
        }
    }
    Ok(BtFit {
        models,
        strengths: beta,
        iterations,
    })
}

#[cfg(test)]
mod tests;
