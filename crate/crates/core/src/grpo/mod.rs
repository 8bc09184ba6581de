//! Group assembly, advantage estimation and the NoisyRollout / GRPO loop.
//!
//! Each step draws a batch of instances, distorts every image with the
//! scheduled strength, samples `n1` rollouts on the clean image and `n2` on
//! the distorted one, pools all rewards for one group-relative advantage, and
//! takes an optimizer step on the clipped token-mean surrogate with every
//! trajectory scored against the clean image.

mod replay;

pub use replay::{decode_replay, encode_replay, ReplayGroup, ReplayStep};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::env::{encode_answer, reward, sample_instance, TaskInstance, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{
    adam_step, greedy_with, init_policy, sample_with, sgd_step, surrogate_grad, AdamState,
    PolicyDims, PolicyParams, Source, SurrogateItem, Trajectory, Weights,
};
use crate::raster::{apply_distortion, DistortionKind, Raster};
use crate::rng::{
    derive_seed, rng_from, TAG_CLEAN, TAG_DISTORT, TAG_EVAL, TAG_INIT, TAG_INSTANCE, TAG_NOISY,
    TAG_WARMUP,
};
use crate::schedule::ScheduleSpec;

/// Population std below this is treated as a uniform-reward group.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvVariant {
    /// `(r - mean) / std`.
    StdNorm,
    /// `r - mean`.
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Every trajectory is scored on the clean image.
    CleanOnly,
    /// Noisy trajectories are scored on the distorted image they came from.
    OnSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n1: usize,
    pub n2: usize,
    pub t_max: usize,
    /// Instances per rollout collection.
    pub rollout_batch: usize,
    /// Optimizer updates per collection; the rollout batch is split evenly.
    pub mini_updates: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub adv_variant: AdvVariant,
    pub schedule: ScheduleSpec,
    pub distortion: DistortionKind,
    /// Permit `RotateCrop` / `CenterCrop`.
    pub allow_diagnostic: bool,
    pub temp_clean: f64,
    pub temp_noisy: f64,
    pub condition_mode: ConditionMode,
    /// Added to every noisy reward before advantages; must be <= 0.
    pub noisy_reward_penalty: f64,
    pub seed: u64,
    /// Fixed dataset of this many instances reshuffled each epoch; 0 streams
    /// fresh instances every step.
    pub dataset_size: usize,
    pub features: usize,
    pub hidden: usize,
    /// Supervised format warm-up before reinforcement learning.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n1: 6,
            n2: 6,
            t_max: 60,
            rollout_batch: 64,
            mini_updates: 1,
            lr: 5e-3,
            optimizer: OptimizerKind::Adam,
            eps_low: 0.2,
            eps_high: 0.2,
            adv_variant: AdvVariant::StdNorm,
            schedule: ScheduleSpec::default(),
            distortion: DistortionKind::GaussianSteps,
            allow_diagnostic: false,
            temp_clean: 1.0,
            temp_noisy: 1.0,
            condition_mode: ConditionMode::CleanOnly,
            noisy_reward_penalty: 0.0,
            seed: 0,
            dataset_size: 0,
            features: 64,
            hidden: 64,
            warmup_steps: 100,
            warmup_lr: 1e-2,
            warmup_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn group_size(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn dims(&self, task: &TaskSpec) -> PolicyDims {
        PolicyDims {
            features: self.features,
            hidden: self.hidden,
            ..PolicyDims::new(task.grid, task.shapes, task.max_len)
        }
    }

    /// The same budget spent entirely on clean rollouts.
    pub fn vanilla(&self) -> Self {
        Self {
            n1: self.n1 + self.n2,
            n2: 0,
            schedule: ScheduleSpec::constant(0.0),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size() < 2 {
            return bad("train.n1 + train.n2 must be >= 2");
        }
        if self.t_max == 0 || self.rollout_batch == 0 {
            return bad("train.t_max and train.rollout_batch must be positive");
        }
        if self.mini_updates == 0 || self.mini_updates > self.rollout_batch {
            return bad("train.mini_updates must be in [1, rollout_batch]");
        }
        if !(self.lr >= 0.0) || !(self.warmup_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0 && self.eps_high < 1.0) {
            return bad("train.eps_low and train.eps_high must be in (0, 1)");
        }
        if !(self.temp_clean > 0.0 && self.temp_noisy > 0.0) {
            return bad("rollout temperatures must be > 0");
        }
        if !(self.noisy_reward_penalty <= 0.0) {
            return bad("train.noisy_reward_penalty must be <= 0");
        }
        if self.features == 0 || self.hidden == 0 {
            return bad("train.features and train.hidden must be positive");
        }
        if self.distortion.is_diagnostic() && !self.allow_diagnostic {
            return Err(Error::Config(format!(
                "distortion {:?} destroys task content; set train.allow_diagnostic = true to use it",
                self.distortion
            )));
        }
        self.schedule.validate()
    }
}

/// Group-relative advantages. Uniform rewards give all zeros.
pub fn compute_advantages(rewards: &[f64], variant: AdvVariant) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Validation(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Validation("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(match variant {
        AdvVariant::StdNorm => rewards.iter().map(|r| (r - mean) / std).collect(),
        AdvVariant::MeanOnly => rewards.iter().map(|r| r - mean).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    /// The distorted image at this step (the clean image when `n2 = 0`).
    pub distorted: Raster,
    pub alpha: f64,
    /// `n1` clean trajectories, then `n2` noisy ones.
    pub trajectories: Vec<Trajectory>,
    /// Outcome rewards in `{0, 1}`.
    pub rewards: Vec<f64>,
    /// Rewards after the noisy penalty; advantages are computed from these.
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Old-policy log-probs under the conditioning used for the update.
    pub old_logprobs: Vec<Vec<f64>>,
    pub condition_mode: ConditionMode,
}

impl RolloutGroup {
    /// Raster that trajectory `i` is scored against during the update.
    pub fn update_raster(&self, i: usize) -> &Raster {
        match (self.condition_mode, self.trajectories[i].source) {
            (ConditionMode::OnSource, Source::Noisy) => &self.distorted,
            _ => &self.instance.image,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|a| *a == 0.0)
    }
}

fn finish_group(
    params_old: &PolicyParams,
    instance: TaskInstance,
    distorted: Raster,
    alpha: f64,
    trajectories: Vec<Trajectory>,
    cfg: &TrainConfig,
) -> Result<RolloutGroup> {
    let rewards: Vec<f64> = trajectories
        .iter()
        .map(|t| reward(&instance, &t.tokens))
        .collect();
    let shaped_rewards: Vec<f64> = rewards
        .iter()
        .zip(&trajectories)
        .map(|(r, t)| match t.source {
            Source::Noisy => r + cfg.noisy_reward_penalty,
            Source::Clean => *r,
        })
        .collect();
    let advantages = compute_advantages(&shaped_rewards, cfg.adv_variant)?;
    let clean_ctx = params_old.context(&instance.image, instance.query_shape)?;
    let noisy_ctx = match cfg.condition_mode {
        ConditionMode::OnSource => Some(params_old.context(&distorted, instance.query_shape)?),
        ConditionMode::CleanOnly => None,
    };
    let old_logprobs = trajectories
        .iter()
        .map(|t| match (&noisy_ctx, t.source) {
            (Some(ctx), Source::Noisy) => params_old.logprobs_with(ctx, &t.tokens),
            _ => params_old.logprobs_with(&clean_ctx, &t.tokens),
        })
        .collect();
    Ok(RolloutGroup {
        instance,
        distorted,
        alpha,
        trajectories,
        rewards,
        shaped_rewards,
        advantages,
        old_logprobs,
        condition_mode: cfg.condition_mode,
    })
}

/// Hybrid rollout for one instance: `n1` clean and `n2` noisy trajectories
/// pooled into a single group.
pub fn collect_group(
    params_old: &PolicyParams,
    instance: &TaskInstance,
    cfg: &TrainConfig,
    alpha_t: f64,
    rng_seed: u64,
) -> Result<RolloutGroup> {
    if !(alpha_t >= 0.0) {
        return Err(Error::Range(format!("alpha_t = {alpha_t} must be >= 0")));
    }
    if cfg.distortion.is_diagnostic() && !cfg.allow_diagnostic {
        return Err(Error::Config(format!(
            "distortion {:?} is diagnostic-only",
            cfg.distortion
        )));
    }
    let distorted = if cfg.n2 > 0 {
        apply_distortion(
            &instance.image,
            cfg.distortion,
            alpha_t,
            derive_seed(rng_seed, &[TAG_DISTORT]),
        )?
    } else {
        instance.image.clone()
    };
    let clean_ctx = params_old.context(&instance.image, instance.query_shape)?;
    let noisy_ctx = params_old.context(&distorted, instance.query_shape)?;
    let mut trajectories = Vec::with_capacity(cfg.group_size());
    for j in 0..cfg.n1 {
        let mut rng = rng_from(derive_seed(rng_seed, &[TAG_CLEAN, j as u64]));
        let (tokens, lps) = sample_with(params_old, &clean_ctx, cfg.temp_clean, &mut rng);
        trajectories.push(Trajectory {
            tokens,
            old_logprobs_gen: lps,
            source: Source::Clean,
            gen_strength: 0.0,
        });
    }
    for k in 0..cfg.n2 {
        let mut rng = rng_from(derive_seed(rng_seed, &[TAG_NOISY, k as u64]));
        let (tokens, lps) = sample_with(params_old, &noisy_ctx, cfg.temp_noisy, &mut rng);
        trajectories.push(Trajectory {
            tokens,
            old_logprobs_gen: lps,
            source: Source::Noisy,
            gen_strength: alpha_t,
        });
    }
    finish_group(params_old, instance.clone(), distorted, alpha_t, trajectories, cfg)
}

/// Plain GRPO group: `n` clean rollouts, no distortion.
pub fn collect_group_vanilla(
    params_old: &PolicyParams,
    instance: &TaskInstance,
    n: usize,
    temperature: f64,
    adv_variant: AdvVariant,
    rng_seed: u64,
) -> Result<RolloutGroup> {
    let ctx = params_old.context(&instance.image, instance.query_shape)?;
    let mut trajectories = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut old_logprobs = Vec::with_capacity(n);
    for j in 0..n {
        let mut rng = rng_from(derive_seed(rng_seed, &[TAG_CLEAN, j as u64]));
        let (tokens, lps) = sample_with(params_old, &ctx, temperature, &mut rng);
        rewards.push(reward(instance, &tokens));
        old_logprobs.push(lps.clone());
        trajectories.push(Trajectory {
            tokens,
            old_logprobs_gen: lps,
            source: Source::Clean,
            gen_strength: 0.0,
        });
    }
    let advantages = compute_advantages(&rewards, adv_variant)?;
    Ok(RolloutGroup {
        instance: instance.clone(),
        distorted: instance.image.clone(),
        alpha: 0.0,
        trajectories,
        shaped_rewards: rewards.clone(),
        rewards,
        advantages,
        old_logprobs,
        condition_mode: ConditionMode::CleanOnly,
    })
}

/// Which subgroup's loss terms take part in an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    All,
    CleanOnly,
    NoisyOnly,
}

impl LossMask {
    fn masks(self, source: Source) -> bool {
        matches!(
            (self, source),
            (LossMask::CleanOnly, Source::Noisy) | (LossMask::NoisyOnly, Source::Clean)
        )
    }
}

/// Build surrogate items for a set of groups.
pub fn surrogate_items<'a>(groups: &'a [RolloutGroup], mask: LossMask) -> Vec<SurrogateItem<'a>> {
    groups
        .iter()
        .flat_map(|g| {
            g.trajectories.iter().enumerate().map(move |(i, t)| SurrogateItem {
                raster: g.update_raster(i),
                query: g.instance.query_shape,
                tokens: &t.tokens,
                old_logprobs: &g.old_logprobs[i],
                advantage: g.advantages[i],
                masked: mask.masks(t.source),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &PolicyParams) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &Weights, lr: f64) -> Result<()> {
        match self {
            OptimizerState::Sgd => sgd_step(params, grads, lr),
            OptimizerState::Adam(st) => adam_step(st, params, grads, lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mean_reward: f64,
    pub clean_mean_reward: f64,
    pub noisy_mean_reward: Option<f64>,
    pub clip_fraction: f64,
    pub loss: f64,
    pub alpha_t: f64,
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn reward_metrics(groups: &[RolloutGroup]) -> (f64, f64, Option<f64>) {
    let by = |src: Option<Source>| {
        mean_of(groups.iter().flat_map(|g| {
            g.rewards
                .iter()
                .zip(&g.trajectories)
                .filter(move |(_, t)| src.is_none_or(|s| t.source == s))
                .map(|(r, _)| *r)
        }))
    };
    (
        by(None).unwrap_or(0.0),
        by(Some(Source::Clean)).unwrap_or(0.0),
        by(Some(Source::Noisy)),
    )
}

/// One collection's worth of optimizer updates with an explicit loss mask.
pub fn update_step_masked(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
    mask: LossMask,
) -> Result<StepMetrics> {
    if groups.is_empty() {
        return Err(Error::Validation("update_step needs at least one group".into()));
    }
    let chunk = groups.len().div_ceil(cfg.mini_updates);
    let mut loss = 0.0;
    let mut clip = 0.0;
    let mut n_updates = 0usize;
    for part in groups.chunks(chunk) {
        let items = surrogate_items(part, mask);
        let out = surrogate_grad(params, &items, cfg.eps_low, cfg.eps_high)?;
        opt.step(params, &out.grads, cfg.lr)?;
        if !params.weights.all_finite() {
            return Err(Error::Validation("non-finite parameters after update".into()));
        }
        loss += out.loss;
        clip += out.clip_fraction;
        n_updates += 1;
    }
    let (mean_reward, clean_mean_reward, noisy_mean_reward) = reward_metrics(groups);
    Ok(StepMetrics {
        mean_reward,
        clean_mean_reward,
        noisy_mean_reward,
        clip_fraction: clip / n_updates as f64,
        loss: loss / n_updates as f64,
        alpha_t: groups[0].alpha,
    })
}

/// Clipped-surrogate update over all trajectories of all groups.
pub fn update_step(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    update_step_masked(params, opt, groups, cfg, LossMask::All)
}

/// Fraction of `n_eval` fresh instances answered exactly under greedy
/// decoding, with evaluation images Gaussian-distorted by `eval_strength`.
pub fn evaluate(
    params: &PolicyParams,
    spec: &TaskSpec,
    n_eval: usize,
    eval_strength: f64,
    seed: u64,
) -> Result<f64> {
    evaluate_with(params, spec, n_eval, DistortionKind::GaussianSteps, eval_strength, seed)
}

pub fn evaluate_with(
    params: &PolicyParams,
    spec: &TaskSpec,
    n_eval: usize,
    kind: DistortionKind,
    eval_strength: f64,
    seed: u64,
) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::Validation("n_eval must be >= 1".into()));
    }
    let hits = (0..n_eval)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let inst = sample_instance(spec, derive_seed(seed, &[TAG_EVAL, i as u64]))?;
            let img = apply_distortion(
                &inst.image,
                kind,
                eval_strength,
                derive_seed(seed, &[TAG_EVAL, i as u64, TAG_DISTORT]),
            )?;
            let ctx = params.context(&img, inst.query_shape)?;
            Ok(reward(&inst, &greedy_with(params, &ctx)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(hits.iter().sum::<f64>() / n_eval as f64)
}

/// Supervised warm-up on the answer format with uniformly random digits,
/// independent of the image content. Teaches `OPEN d CLOSE EOS` without
/// teaching the count.
pub fn format_warmup(
    params: &mut PolicyParams,
    spec: &TaskSpec,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let mut state = AdamState::new(params);
    for s in 0..steps {
        let samples: Vec<(TaskInstance, Vec<crate::env::Token>)> = (0..batch)
            .map(|b| {
                let inst_seed = derive_seed(seed, &[TAG_WARMUP, s as u64, b as u64]);
                let inst = sample_instance(spec, inst_seed)?;
                let digit = rng_from(inst_seed ^ 0x5eed).gen_range(0..10u64);
                Ok((inst, encode_answer(digit)))
            })
            .collect::<Result<_>>()?;
        let olds: Vec<Vec<f64>> = samples
            .iter()
            .map(|(inst, toks)| {
                params
                    .context(&inst.image, inst.query_shape)
                    .map(|ctx| params.logprobs_with(&ctx, toks))
            })
            .collect::<Result<_>>()?;
        // At unit ratio the surrogate gradient with A = 1 is the negative
        // mean log-likelihood gradient.
        let items: Vec<SurrogateItem<'_>> = samples
            .iter()
            .zip(&olds)
            .map(|((inst, toks), old)| {
                SurrogateItem::new(&inst.image, inst.query_shape, toks, old, 1.0)
            })
            .collect();
        let out = surrogate_grad(params, &items, 0.2, 0.2)?;
        adam_step(&mut state, params, &out.grads, lr)?;
    }
    Ok(())
}

/// Evaluation settings applied during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub n_eval: usize,
    pub eval_strengths: Vec<f64>,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub log_diversity_every: usize,
    pub record_replay: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n_eval: 1000,
            eval_strengths: vec![0.0, 200.0],
            eval_every: 0,
            checkpoint_every: 5,
            log_diversity_every: 5,
            record_replay: false,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha_t: f64,
    pub mean_reward: f64,
    pub clean_mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noisy_mean_reward: Option<f64>,
    pub clip_fraction: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc_clean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc_distorted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<f64>,
}

/// Receives run artefacts as they are produced.
pub trait TrainSink {
    fn record(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _step: usize, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }
    fn replay(&mut self, _step: &ReplayStep) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Keeps records and checkpoints in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<(usize, PolicyParams)>,
    pub replays: Vec<ReplayStep>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, r: &StepRecord) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
    fn checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<()> {
        self.checkpoints.push((step, params.clone()));
        Ok(())
    }
    fn replay(&mut self, step: &ReplayStep) -> Result<()> {
        self.replays.push(step.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub records: Vec<StepRecord>,
    /// Greedy accuracy of the freshly initialised policy.
    pub untrained_acc: f64,
    /// Greedy accuracy right after the format warm-up.
    pub warmup_acc: f64,
    /// `(strength, accuracy)` after the final step.
    pub final_eval: Vec<(f64, f64)>,
}

/// Instances for each step: streamed fresh, or drawn from a fixed dataset in
/// reshuffled epochs.
struct InstanceSource {
    task: TaskSpec,
    seed: u64,
    batch: usize,
    dataset: Vec<u64>,
}

impl InstanceSource {
    fn new(task: TaskSpec, cfg: &TrainConfig) -> Self {
        let dataset = (0..cfg.dataset_size)
            .map(|i| derive_seed(cfg.seed, &[TAG_INSTANCE, u64::MAX, i as u64]))
            .collect();
        Self {
            task,
            seed: cfg.seed,
            batch: cfg.rollout_batch,
            dataset,
        }
    }

    fn seeds(&self, step: usize) -> Vec<u64> {
        if self.dataset.is_empty() {
            return (0..self.batch)
                .map(|b| derive_seed(self.seed, &[TAG_INSTANCE, step as u64, b as u64]))
                .collect();
        }
        let n = self.dataset.len();
        let start = (step - 1) * self.batch;
        (start..start + self.batch)
            .map(|pos| {
                let epoch = pos / n;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng_from(derive_seed(self.seed, &[TAG_INSTANCE, epoch as u64])));
                self.dataset[order[pos % n]]
            })
            .collect()
    }

    fn batch(&self, step: usize) -> Result<Vec<TaskInstance>> {
        self.seeds(step)
            .into_iter()
            .map(|s| sample_instance(&self.task, s))
            .collect()
    }
}

/// Mean within-group diversity over a step's groups.
pub fn step_diversity(groups: &[RolloutGroup]) -> Result<f64> {
    let vals = groups
        .iter()
        .map(|g| analysis::diversity(&g.trajectories))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

fn due(step: usize, every: usize) -> bool {
    every > 0 && (step == 1 || step.is_multiple_of(every))
}

/// Seed for evaluation sets; shared by every arm run from one master seed.
pub fn eval_seed(master: u64) -> u64 {
    derive_seed(master, &[TAG_EVAL])
}

type Collector<'a> =
    dyn Fn(&PolicyParams, &TaskInstance, f64, u64) -> Result<RolloutGroup> + Sync + 'a;

fn run_loop(
    cfg: &TrainConfig,
    task: &TaskSpec,
    opts: &RunOptions,
    sink: &mut dyn TrainSink,
    alpha_at: &dyn Fn(usize) -> Result<f64>,
    collect: &Collector<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    let mut params = init_policy(cfg.dims(task), derive_seed(cfg.seed, &[TAG_INIT]))?;
    let eval_seed = eval_seed(cfg.seed);
    let n_eval = opts.n_eval.max(1);
    let untrained_acc = evaluate(&params, task, n_eval, 0.0, eval_seed)?;
    format_warmup(
        &mut params,
        task,
        cfg.warmup_steps,
        cfg.warmup_batch,
        cfg.warmup_lr,
        derive_seed(cfg.seed, &[TAG_WARMUP]),
    )?;
    let warmup_acc = evaluate(&params, task, n_eval, 0.0, eval_seed)?;
    sink.checkpoint(0, &params)?;

    let source = InstanceSource::new(*task, cfg);
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut records = Vec::with_capacity(cfg.t_max);
    let mut final_eval = Vec::new();
    for t in 1..=cfg.t_max {
        let step_result = (|| -> Result<()> {
            let alpha = alpha_at(t)?;
            let instances = source.batch(t)?;
            let groups = instances
                .par_iter()
                .enumerate()
                .map(|(b, inst)| collect(&params, inst, alpha, derive_seed(cfg.seed, &[t as u64, b as u64])))
                .collect::<Result<Vec<_>>>()?;
            if opts.record_replay {
                sink.replay(&ReplayStep::from_groups(t, &groups))?;
            }
            let diversity = if due(t, opts.log_diversity_every) {
                Some(step_diversity(&groups)?)
            } else {
                None
            };
            let m = update_step(&mut params, &mut opt, &groups, cfg)?;
            let mut record = StepRecord {
                step: t,
                alpha_t: alpha,
                mean_reward: m.mean_reward,
                clean_mean_reward: m.clean_mean_reward,
                noisy_mean_reward: m.noisy_mean_reward,
                clip_fraction: m.clip_fraction,
                loss: m.loss,
                eval_acc_clean: None,
                eval_acc_distorted: None,
                diversity,
            };
            let eval_now = t == cfg.t_max || (opts.eval_every > 0 && t % opts.eval_every == 0);
            if eval_now && !opts.eval_strengths.is_empty() {
                let accs = opts
                    .eval_strengths
                    .iter()
                    .map(|&s| evaluate(&params, task, n_eval, s, eval_seed).map(|a| (s, a)))
                    .collect::<Result<Vec<_>>>()?;
                record.eval_acc_clean = accs.iter().find(|(s, _)| *s == 0.0).map(|p| p.1);
                record.eval_acc_distorted = accs
                    .iter()
                    .filter(|(s, _)| *s > 0.0)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|p| p.1);
                if t == cfg.t_max {
                    final_eval = accs;
                }
            }
            sink.record(&record)?;
            records.push(record);
            if (opts.checkpoint_every > 0 && t % opts.checkpoint_every == 0) || t == cfg.t_max {
                sink.checkpoint(t, &params)?;
            }
            Ok(())
        })();
        step_result.map_err(|e| e.at_step(t))?;
    }
    Ok(TrainOutcome {
        params,
        records,
        untrained_acc,
        warmup_acc,
        final_eval,
    })
}

/// NoisyRollout training loop.
pub fn train(
    cfg: &TrainConfig,
    task: &TaskSpec,
    opts: &RunOptions,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let alpha_at = |t: usize| cfg.schedule.eval(t, cfg.t_max);
    let collect = |p: &PolicyParams, inst: &TaskInstance, alpha: f64, seed: u64| {
        collect_group(p, inst, cfg, alpha, seed)
    };
    run_loop(cfg, task, opts, sink, &alpha_at, &collect)
}

/// Vanilla GRPO with `n1 + n2` clean rollouts and no distortion.
pub fn train_vanilla(
    cfg: &TrainConfig,
    task: &TaskSpec,
    opts: &RunOptions,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let n = cfg.group_size();
    let alpha_at = |_: usize| Ok(0.0);
    let collect = |p: &PolicyParams, inst: &TaskInstance, _alpha: f64, seed: u64| {
        collect_group_vanilla(p, inst, n, cfg.temp_clean, cfg.adv_variant, seed)
    };
    run_loop(cfg, task, opts, sink, &alpha_at, &collect)
}
