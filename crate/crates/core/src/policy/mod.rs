//! Autoregressive token policy over GlyphCount answers.
//!
//! The observation passes through a fixed random projection (never trained),
//! is concatenated with a one-hot query and a normalised bag of the tokens
//! emitted so far, and feeds a one-hidden-layer tanh network that scores the
//! next token:
//!
//! ```text
//! z      = [P x ; onehot(q) ; bag(prefix) / max_len]
//! logits = W2 tanh(W1 z + b1) + b2
//! ```
//!
//! Gradients of the clipped surrogate are computed analytically; see
//! [`surrogate_grad`] and the finite-difference checker [`fd_check`].

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::{adam_step, sgd_step, AdamState};

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Token, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::rng_from;

pub const TENSOR_NAMES: [&str; 4] = ["W1", "b1", "W2", "b2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Projected image features.
    pub features: usize,
    pub hidden: usize,
    pub shapes: usize,
    pub vocab: usize,
    /// Raster side length; the projection consumes `grid * grid` pixels.
    pub grid: usize,
    pub max_len: usize,
}

impl PolicyDims {
    pub fn new(grid: usize, shapes: usize, max_len: usize) -> Self {
        Self {
            features: 64,
            hidden: 64,
            shapes,
            vocab: VOCAB_SIZE,
            grid,
            max_len,
        }
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    /// Width of the hidden layer's input.
    pub fn input(&self) -> usize {
        self.features + self.shapes + self.vocab
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.features,
            self.hidden,
            self.shapes,
            self.vocab,
            self.grid,
            self.max_len,
        ];
        if all.contains(&0) {
            return Err(Error::Validation(format!("policy dims must be positive: {self:?}")));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(Error::Validation(format!("vocab must be {VOCAB_SIZE}")));
        }
        Ok(())
    }
}

/// Trainable tensors. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `vocab x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Weights {
    pub fn zeros(dims: &PolicyDims) -> Self {
        Self {
            w1: vec![0.0; dims.hidden * dims.input()],
            b1: vec![0.0; dims.hidden],
            w2: vec![0.0; dims.vocab * dims.hidden],
            b2: vec![0.0; dims.vocab],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Tensors in canonical order, matching [`TENSOR_NAMES`].
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.tensors()[i])
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Weights) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.len() == b.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Weights) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    fn flat_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                return &mut t[i];
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    /// `features x pixels`, row-major. Never updated.
    frozen_proj: Vec<f64>,
    pub weights: Weights,
}

fn uniform_fill<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Initialise a policy with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub fn init_policy(dims: PolicyDims, rng_seed: u64) -> Result<PolicyParams> {
    dims.validate()?;
    let mut rng = rng_from(rng_seed);
    let frozen_proj = uniform_fill(&mut rng, dims.features * dims.pixels(), dims.pixels());
    let w1 = uniform_fill(&mut rng, dims.hidden * dims.input(), dims.input());
    let b1 = uniform_fill(&mut rng, dims.hidden, dims.input());
    let w2 = uniform_fill(&mut rng, dims.vocab * dims.hidden, dims.hidden);
    let b2 = uniform_fill(&mut rng, dims.vocab, dims.hidden);
    Ok(PolicyParams {
        dims,
        frozen_proj,
        weights: Weights { w1, b1, w2, b2 },
    })
}

impl PolicyParams {
    pub fn from_parts(dims: PolicyDims, frozen_proj: Vec<f64>, weights: Weights) -> Result<Self> {
        dims.validate()?;
        if frozen_proj.len() != dims.features * dims.pixels()
            || !weights.same_shape(&Weights::zeros(&dims))
        {
            return Err(Error::Validation("tensor sizes do not match dims".into()));
        }
        Ok(Self {
            dims,
            frozen_proj,
            weights,
        })
    }

    pub fn frozen_proj(&self) -> &[f64] {
        &self.frozen_proj
    }

    /// FNV-1a over the little-endian bytes of the frozen projection.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.frozen_proj {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Project a raster through the frozen map. Rasters of any other size
    /// (e.g. rotation-expanded ones) are first resampled to the grid.
    pub fn encode_image(&self, raster: &Raster) -> Result<Vec<f64>> {
        let n = self.dims.pixels();
        let g = self.dims.grid;
        let resized;
        let raster = if raster.width() == g && raster.height() == g {
            raster
        } else {
            resized = crate::raster::resize(raster, g, g)?;
            &resized
        };
        let px = raster.pixels();
        Ok(self
            .frozen_proj
            .chunks_exact(n)
            .map(|row| row.iter().zip(px).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Observation context: image features plus query, ready for decoding.
    pub fn context(&self, raster: &Raster, query_shape: usize) -> Result<Context> {
        if query_shape >= self.dims.shapes {
            return Err(Error::Validation(format!(
                "query shape {query_shape} out of range (shapes = {})",
                self.dims.shapes
            )));
        }
        let features = self.encode_image(raster)?;
        let d = &self.dims;
        let input = d.input();
        let base = (0..d.hidden)
            .map(|i| {
                let row = &self.weights.w1[i * input..(i + 1) * input];
                let dot: f64 = row[..d.features].iter().zip(&features).map(|(w, f)| w * f).sum();
                dot + row[d.features + query_shape] + self.weights.b1[i]
            })
            .collect();
        Ok(Context {
            features,
            query: query_shape,
            base,
        })
    }
}

/// Per-observation cache: features and the prefix-independent part of the
/// hidden pre-activation.
#[derive(Debug, Clone)]
pub struct Context {
    features: Vec<f64>,
    query: usize,
    base: Vec<f64>,
}

/// Hidden activations and log-probabilities at one decoding position.
struct Step {
    hidden: Vec<f64>,
    logprobs: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl PolicyParams {
    /// Hidden pre-activation: cached base plus the bag-of-prefix columns.
    fn preact(&self, ctx: &Context, prefix: &[Token]) -> Vec<f64> {
        let d = &self.dims;
        let input = d.input();
        let inv = 1.0 / d.max_len as f64;
        let mut a = ctx.base.clone();
        for tok in prefix {
            let col = d.features + d.shapes + tok.id();
            for (i, ai) in a.iter_mut().enumerate() {
                *ai += self.weights.w1[i * input + col] * inv;
            }
        }
        a
    }

    fn logits_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let h = self.dims.hidden;
        self.weights
            .w2
            .chunks_exact(h)
            .zip(&self.weights.b2)
            .map(|(row, b)| row.iter().zip(hidden).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    fn step(&self, ctx: &Context, prefix: &[Token]) -> Step {
        let hidden: Vec<f64> = self.preact(ctx, prefix).into_iter().map(f64::tanh).collect();
        let logprobs = log_softmax(&self.logits_from_hidden(&hidden));
        Step { hidden, logprobs }
    }

    /// Next-token logits from a prepared context.
    pub fn logits_with(&self, ctx: &Context, prefix: &[Token]) -> Vec<f64> {
        let hidden: Vec<f64> = self.preact(ctx, prefix).into_iter().map(f64::tanh).collect();
        self.logits_from_hidden(&hidden)
    }

    /// Per-token log-probabilities of `tokens` from a prepared context.
    pub fn logprobs_with(&self, ctx: &Context, tokens: &[Token]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.step(ctx, &tokens[..t]).logprobs[tokens[t].id()])
            .collect()
    }
}

/// Next-token logits given an image, query and emitted prefix.
pub fn token_logits(
    params: &PolicyParams,
    raster: &Raster,
    query_shape: usize,
    prefix: &[Token],
) -> Result<Vec<f64>> {
    if prefix.len() >= params.dims.max_len {
        return Err(Error::Validation(format!(
            "prefix length {} must be below max_len {}",
            prefix.len(),
            params.dims.max_len
        )));
    }
    let ctx = params.context(raster, query_shape)?;
    Ok(params.logits_with(&ctx, prefix))
}

/// Exact temperature-1 log-probabilities along `tokens`.
pub fn logprobs_under(
    params: &PolicyParams,
    raster: &Raster,
    query_shape: usize,
    tokens: &[Token],
) -> Result<Vec<f64>> {
    if tokens.len() > params.dims.max_len {
        return Err(Error::Validation(format!(
            "trajectory length {} exceeds max_len {}",
            tokens.len(),
            params.dims.max_len
        )));
    }
    let ctx = params.context(raster, query_shape)?;
    Ok(params.logprobs_with(&ctx, tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    /// Temperature-1 log-probabilities under the conditioning that generated
    /// the trajectory.
    pub old_logprobs_gen: Vec<f64>,
    pub source: Source,
    pub gen_strength: f64,
}

impl AsRef<[Token]> for Trajectory {
    fn as_ref(&self) -> &[Token] {
        &self.tokens
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sample until EOS or `max_len` from `softmax(logits / temperature)`.
pub fn sample_with<R: Rng>(
    params: &PolicyParams,
    ctx: &Context,
    temperature: f64,
    rng: &mut R,
) -> (Vec<Token>, Vec<f64>) {
    let mut tokens = Vec::with_capacity(params.dims.max_len);
    let mut lps = Vec::with_capacity(params.dims.max_len);
    while tokens.len() < params.dims.max_len {
        let st = params.step(ctx, &tokens);
        let id = if temperature == 1.0 {
            categorical(&st.logprobs, rng)
        } else {
            // log_softmax(lp / T) == log_softmax(logits / T).
            let scaled: Vec<f64> = st.logprobs.iter().map(|l| l / temperature).collect();
            categorical(&log_softmax(&scaled), rng)
        };
        let tok = Token::from_id(id).expect("vocab id");
        tokens.push(tok);
        lps.push(st.logprobs[id]);
        if tok == Token::EOS {
            break;
        }
    }
    (tokens, lps)
}

fn categorical<R: Rng>(logprobs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the accumulated mass: take the last nonzero entry.
    logprobs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(logprobs.len() - 1)
}

/// Sample a trajectory for one observation.
pub fn sample_trajectory(
    params: &PolicyParams,
    raster: &Raster,
    query_shape: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<Trajectory> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Range(format!("temperature {temperature} must be > 0")));
    }
    let ctx = params.context(raster, query_shape)?;
    let mut rng = rng_from(rng_seed);
    let (tokens, old_logprobs_gen) = sample_with(params, &ctx, temperature, &mut rng);
    Ok(Trajectory {
        tokens,
        old_logprobs_gen,
        source: Source::Clean,
        gen_strength: 0.0,
    })
}

/// Argmax decoding from a prepared context.
pub fn greedy_with(params: &PolicyParams, ctx: &Context) -> Vec<Token> {
    let mut tokens = Vec::with_capacity(params.dims.max_len);
    while tokens.len() < params.dims.max_len {
        let logits = params.logits_with(ctx, &tokens);
        let id = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0;
        let tok = Token::from_id(id).expect("vocab id");
        tokens.push(tok);
        if tok == Token::EOS {
            break;
        }
    }
    tokens
}

pub fn greedy_decode(params: &PolicyParams, raster: &Raster, query_shape: usize) -> Result<Vec<Token>> {
    Ok(greedy_with(params, &params.context(raster, query_shape)?))
}

/// Mean per-position entropy (nats) of the sampling distribution along a
/// trajectory prefix set.
pub fn step_entropy(params: &PolicyParams, ctx: &Context, prefix: &[Token]) -> f64 {
    let st = params.step(ctx, prefix);
    -st.logprobs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// One trajectory's contribution to the clipped surrogate.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateItem<'a> {
    /// Raster the numerator log-probabilities condition on.
    pub raster: &'a Raster,
    pub query: usize,
    pub tokens: &'a [Token],
    /// Old-policy log-probabilities under the same conditioning.
    pub old_logprobs: &'a [f64],
    pub advantage: f64,
    /// Masked items keep their tokens in the normaliser but contribute no loss.
    pub masked: bool,
}

impl<'a> SurrogateItem<'a> {
    pub fn new(
        raster: &'a Raster,
        query: usize,
        tokens: &'a [Token],
        old_logprobs: &'a [f64],
        advantage: f64,
    ) -> Self {
        Self {
            raster,
            query,
            tokens,
            old_logprobs,
            advantage,
            masked: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grads: Weights,
    /// Fraction of tokens whose clipped branch is active.
    pub clip_fraction: f64,
    pub tokens: usize,
}

fn validate_batch(params: &PolicyParams, batch: &[SurrogateItem<'_>], el: f64, eh: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Validation("surrogate batch is empty".into()));
    }
    if !(el > 0.0 && el < 1.0 && eh > 0.0 && eh < 1.0) {
        return Err(Error::Range(format!(
            "clip ranges ({el}, {eh}) must lie in (0, 1)"
        )));
    }
    for (i, it) in batch.iter().enumerate() {
        if it.tokens.len() != it.old_logprobs.len() {
            return Err(Error::Validation(format!(
                "item {i}: {} tokens but {} old log-probs",
                it.tokens.len(),
                it.old_logprobs.len()
            )));
        }
        if it.tokens.len() > params.dims.max_len {
            return Err(Error::Validation(format!("item {i}: trajectory too long")));
        }
        if it.advantage.is_nan() || it.old_logprobs.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation(format!("item {i}: NaN in surrogate inputs")));
        }
    }
    Ok(())
}

/// Contexts for every distinct raster in the batch, keyed by address.
fn contexts<'a>(
    params: &PolicyParams,
    batch: &[SurrogateItem<'a>],
) -> Result<HashMap<(*const Raster, usize), Context>> {
    let mut map = HashMap::new();
    for it in batch {
        let key = (it.raster as *const Raster, it.query);
        if let std::collections::hash_map::Entry::Vacant(e) = map.entry(key) {
            e.insert(params.context(it.raster, it.query)?);
        }
    }
    Ok(map)
}

/// Per-token clipped objective and its derivative with respect to the
/// new log-probability. Returns `(term, d term / d logprob, clipped)`.
#[inline]
fn clipped_term(logprob: f64, old: f64, adv: f64, el: f64, eh: f64) -> (f64, f64, bool) {
    let ratio = (logprob - old).exp();
    let clipped_ratio = ratio.clamp(1.0 - el, 1.0 + eh);
    let unclipped = ratio * adv;
    let clipped = clipped_ratio * adv;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, unclipped, false)
    }
}

/// Token-mean clipped surrogate loss and its exact gradient.
///
/// `loss = -(sum over every token of min(r A, clip(r, 1-el, 1+eh) A)) / N`
/// where `N` counts all tokens in the batch, masked items included.
pub fn surrogate_grad(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
) -> Result<SurrogateOutput> {
    validate_batch(params, batch, eps_low, eps_high)?;
    let ctxs = contexts(params, batch)?;
    let d = params.dims;
    let input = d.input();
    let inv_len = 1.0 / d.max_len as f64;
    let total: usize = batch.iter().map(|it| it.tokens.len()).sum();
    let mut grads = Weights::zeros(&d);
    if total == 0 {
        return Ok(SurrogateOutput {
            loss: 0.0,
            grads,
            clip_fraction: 0.0,
            tokens: 0,
        });
    }
    let norm = 1.0 / total as f64;
    let mut objective = 0.0;
    let mut clipped_tokens = 0usize;
    let mut z = vec![0.0; input];
    let mut g_hidden = vec![0.0; d.hidden];

    for it in batch {
        if it.masked {
            continue;
        }
        let ctx = &ctxs[&(it.raster as *const Raster, it.query)];
        for t in 0..it.tokens.len() {
            let prefix = &it.tokens[..t];
            let st = params.step(ctx, prefix);
            let y = it.tokens[t].id();
            let (term, dterm, was_clipped) =
                clipped_term(st.logprobs[y], it.old_logprobs[t], it.advantage, eps_low, eps_high);
            objective += term;
            clipped_tokens += was_clipped as usize;
            // d loss / d logprob.
            let c = -dterm * norm;
            if c == 0.0 {
                continue;
            }
            // d logprob_y / d logits = onehot(y) - softmax.
            g_hidden.iter_mut().for_each(|x| *x = 0.0);
            for v in 0..d.vocab {
                let g = c * ((v == y) as u8 as f64 - st.logprobs[v].exp());
                grads.b2[v] += g;
                let row = &mut grads.w2[v * d.hidden..(v + 1) * d.hidden];
                for (gw, h) in row.iter_mut().zip(&st.hidden) {
                    *gw += g * h;
                }
                let wrow = &params.weights.w2[v * d.hidden..(v + 1) * d.hidden];
                for (gh, w) in g_hidden.iter_mut().zip(wrow) {
                    *gh += g * w;
                }
            }
            // Input vector for this position.
            z[..d.features].copy_from_slice(&ctx.features);
            z[d.features..].iter_mut().for_each(|x| *x = 0.0);
            z[d.features + ctx.query] = 1.0;
            for tok in prefix {
                z[d.features + d.shapes + tok.id()] += inv_len;
            }
            for i in 0..d.hidden {
                let h = st.hidden[i];
                let ga = g_hidden[i] * (1.0 - h * h);
                if ga == 0.0 {
                    continue;
                }
                grads.b1[i] += ga;
                let row = &mut grads.w1[i * input..(i + 1) * input];
                for (gw, zk) in row.iter_mut().zip(&z) {
                    *gw += ga * zk;
                }
            }
        }
    }
    Ok(SurrogateOutput {
        loss: -objective * norm,
        grads,
        clip_fraction: clipped_tokens as f64 / total as f64,
        tokens: total,
    })
}

/// Loss only, for finite differencing.
pub fn surrogate_loss(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
) -> Result<f64> {
    validate_batch(params, batch, eps_low, eps_high)?;
    let ctxs = contexts(params, batch)?;
    let total: usize = batch.iter().map(|it| it.tokens.len()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut objective = 0.0;
    for it in batch.iter().filter(|it| !it.masked) {
        let ctx = &ctxs[&(it.raster as *const Raster, it.query)];
        for (t, lp) in params.logprobs_with(ctx, it.tokens).into_iter().enumerate() {
            objective += clipped_term(lp, it.old_logprobs[t], it.advantage, eps_low, eps_high).0;
        }
    }
    Ok(-objective / total as f64)
}

/// Reject batches with a ratio within `margin` of a clip boundary.
fn check_clip_margin(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
    margin: f64,
) -> Result<()> {
    let ctxs = contexts(params, batch)?;
    for (i, it) in batch.iter().enumerate() {
        let ctx = &ctxs[&(it.raster as *const Raster, it.query)];
        for (t, lp) in params.logprobs_with(ctx, it.tokens).into_iter().enumerate() {
            let ratio = (lp - it.old_logprobs[t]).exp();
            let gap = (ratio - (1.0 - eps_low))
                .abs()
                .min((ratio - (1.0 + eps_high)).abs());
            if gap <= margin {
                return Err(Error::Validation(format!(
                    "item {i} token {t}: ratio {ratio} within {margin} of a clip boundary"
                )));
            }
        }
    }
    Ok(())
}

/// Central-difference check of [`surrogate_grad`] over every trainable
/// coordinate. Returns `max |analytic - fd| / max(|fd|, 1e-8)`.
pub fn fd_check(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
    h: f64,
) -> Result<f64> {
    let n = params.weights.len();
    fd_check_coords(params, batch, eps_low, eps_high, h, &(0..n).collect::<Vec<_>>())
}

/// [`fd_check`] on `n_coords` coordinates drawn without replacement.
pub fn fd_check_sampled(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    let n = params.weights.len();
    let coords = rand::seq::index::sample(&mut rng_from(seed), n, n_coords.min(n)).into_vec();
    fd_check_coords(params, batch, eps_low, eps_high, h, &coords)
}

fn fd_check_coords(
    params: &PolicyParams,
    batch: &[SurrogateItem<'_>],
    eps_low: f64,
    eps_high: f64,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Range(format!("finite-difference step {h} must be > 0")));
    }
    check_clip_margin(params, batch, eps_low, eps_high, 10.0 * h)?;
    let analytic = surrogate_grad(params, batch, eps_low, eps_high)?.grads.flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &k in coords {
        let orig = *probe.weights.flat_mut(k);
        *probe.weights.flat_mut(k) = orig + h;
        let up = surrogate_loss(&probe, batch, eps_low, eps_high)?;
        *probe.weights.flat_mut(k) = orig - h;
        let down = surrogate_loss(&probe, batch, eps_low, eps_high)?;
        *probe.weights.flat_mut(k) = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[k] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
