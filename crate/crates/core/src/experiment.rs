//! File-backed runs: training into an output directory, paired comparisons,
//! offline analyses over stored artefacts, and distortion previews.
//!
//! Run directory layout:
//!
//! ```text
//! out_dir/
//!   config.toml          resolved configuration
//!   metrics.jsonl        one StepRecord per line
//!   step-{t}.ckpt        checkpoints (t = 0 is the post-warm-up policy)
//!   replay/step-{t}.replay   rollout batches, when io.record_replay is set
//!   summary.json
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, bt_fit, BtFit, Comparison, GradReport};
use crate::config::ExperimentConfig;
use crate::env::{sample_instance, TaskSpec};
use crate::error::{Error, Result};
use crate::grpo::{
    decode_replay, encode_replay, evaluate_with, train, train_vanilla, ReplayStep, StepRecord,
    TrainOutcome, TrainSink,
};
use crate::policy::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, PolicyParams};
use crate::raster::{apply_distortion, psnr, DistortionKind};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPLAY_DIR: &str = "replay";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step}.ckpt"))
}

pub fn replay_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(REPLAY_DIR).join(format!("step-{step}.replay"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Streams run artefacts into a directory.
pub struct FileSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    master_seed: u64,
}

impl FileSink {
    pub fn create(dir: &Path, master_seed: u64) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
            master_seed,
        })
    }
}

impl TrainSink for FileSink {
    fn record(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        let path = self.dir.join(METRICS_FILE);
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<()> {
        let meta = CheckpointMeta {
            global_step: step,
            master_seed: self.master_seed,
        };
        save_checkpoint(&checkpoint_path(&self.dir, step), params, meta)
    }

    fn replay(&mut self, step: &ReplayStep) -> Result<()> {
        create_dir(&self.dir.join(REPLAY_DIR))?;
        write_file(&replay_path(&self.dir, step.step), &encode_replay(step))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Noisy,
    Vanilla,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Noisy => "noisy",
            Arm::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub strength: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: Arm,
    pub seed: u64,
    pub untrained_acc: f64,
    pub warmup_acc: f64,
    pub final_eval: Vec<EvalPoint>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
}

/// Train one arm into `cfg.io.out_dir`.
pub fn run_training(cfg: &ExperimentConfig, arm: Arm) -> Result<RunResult> {
    cfg.validate()?;
    let dir = cfg.io.out_dir.clone();
    let mut sink = FileSink::create(&dir, cfg.train.seed)?;
    let mut snapshot = cfg.clone();
    if arm == Arm::Vanilla {
        snapshot.train = cfg.train.vanilla();
    }
    write_file(&dir.join(CONFIG_FILE), snapshot.to_toml_string()?.as_bytes())?;
    let opts = cfg.run_options();
    let outcome = match arm {
        Arm::Noisy => train(&cfg.train, &cfg.task, &opts, &mut sink)?,
        Arm::Vanilla => train_vanilla(&cfg.train, &cfg.task, &opts, &mut sink)?,
    };
    let summary = RunSummary {
        arm,
        seed: cfg.train.seed,
        untrained_acc: outcome.untrained_acc,
        warmup_acc: outcome.warmup_acc,
        final_eval: outcome
            .final_eval
            .iter()
            .map(|&(strength, accuracy)| EvalPoint { strength, accuracy })
            .collect(),
        steps: outcome.records.len(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunResult { summary, outcome })
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

pub fn read_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(Some(&dir.join(CONFIG_FILE)), &[])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmMeans {
    pub final_eval: Vec<EvalPoint>,
    /// Mean logged diversity over steps `1..=early_steps`.
    pub early_diversity: Option<f64>,
    pub untrained_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub early_steps: usize,
    pub noisy: ArmMeans,
    pub vanilla: ArmMeans,
    pub runs: Vec<RunSummary>,
}

pub const EARLY_STEPS: usize = 15;

fn arm_means(results: &[&RunResult]) -> ArmMeans {
    let n = results.len() as f64;
    let strengths: Vec<f64> = results[0]
        .summary
        .final_eval
        .iter()
        .map(|p| p.strength)
        .collect();
    let final_eval = strengths
        .iter()
        .enumerate()
        .map(|(i, &strength)| EvalPoint {
            strength,
            accuracy: results
                .iter()
                .map(|r| r.summary.final_eval[i].accuracy)
                .sum::<f64>()
                / n,
        })
        .collect();
    let per_run: Vec<f64> = results
        .iter()
        .filter_map(|r| {
            let vals: Vec<f64> = r
                .outcome
                .records
                .iter()
                .filter(|rec| rec.step <= EARLY_STEPS)
                .filter_map(|rec| rec.diversity)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let early_diversity =
        (per_run.len() == results.len()).then(|| per_run.iter().sum::<f64>() / n);
    ArmMeans {
        final_eval,
        early_diversity,
        untrained_acc: results.iter().map(|r| r.summary.untrained_acc).sum::<f64>() / n,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Run every seed under both arms and write `compare.csv`,
/// `compare_final.csv` and `compare.json` into `cfg.io.out_dir`.
pub fn run_compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    let root = cfg.io.out_dir.clone();
    create_dir(&root)?;
    let mut results: Vec<(u64, Arm, RunResult)> = Vec::new();
    for &seed in seeds {
        for arm in [Arm::Noisy, Arm::Vanilla] {
            let mut c = cfg.clone();
            c.train.seed = seed;
            c.io.out_dir = root.join(format!("seed-{seed}")).join(arm.name());
            results.push((seed, arm, run_training(&c, arm)?));
        }
    }

    let path = root.join("compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let metrics = ["mean_reward", "diversity", "clip_fraction"];
    let mut header = vec!["step".to_string()];
    for m in metrics {
        for (seed, arm, _) in &results {
            header.push(format!("{m}[{}-{seed}]", arm.name()));
        }
    }
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for t in 0..cfg.train.t_max {
        let mut row = vec![(t + 1).to_string()];
        for m in metrics {
            for (_, _, r) in &results {
                let rec = &r.outcome.records[t];
                row.push(match m {
                    "mean_reward" => rec.mean_reward.to_string(),
                    "diversity" => fmt_opt(rec.diversity),
                    _ => rec.clip_fraction.to_string(),
                });
            }
        }
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = root.join("compare_final.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["seed", "arm", "strength", "accuracy"])
        .map_err(|e| csv_err(&path, e))?;
    for (seed, arm, r) in &results {
        for p in &r.summary.final_eval {
            w.write_record([
                seed.to_string(),
                arm.name().to_string(),
                p.strength.to_string(),
                p.accuracy.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let pick = |a: Arm| -> Vec<&RunResult> {
        results.iter().filter(|x| x.1 == a).map(|x| &x.2).collect()
    };
    let report = CompareReport {
        seeds: seeds.to_vec(),
        early_steps: EARLY_STEPS,
        noisy: arm_means(&pick(Arm::Noisy)),
        vanilla: arm_means(&pick(Arm::Vanilla)),
        runs: results.iter().map(|x| x.2.summary.clone()).collect(),
    };
    write_json(&root.join("compare.json"), &report)?;
    Ok(report)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Steps that have a stored replay, ascending.
pub fn replay_steps(run_dir: &Path) -> Result<Vec<usize>> {
    let dir = run_dir.join(REPLAY_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut steps: Vec<usize> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("step-")?.strip_suffix(".replay")?.parse().ok()
        })
        .collect();
    steps.sort_unstable();
    Ok(steps)
}

pub fn checkpoint_steps(run_dir: &Path) -> Result<Vec<usize>> {
    let mut steps: Vec<usize> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .collect();
    steps.sort_unstable();
    Ok(steps)
}

pub fn load_replay(run_dir: &Path, step: usize) -> Result<ReplayStep> {
    let path = replay_path(run_dir, step);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_replay(&bytes)
}

/// Per-step mean within-group diversity recomputed from stored replays.
/// Writes `diversity.csv` to `out`.
pub fn analyze_diversity(run_dir: &Path, out: &Path) -> Result<Vec<(usize, f64)>> {
    let steps = replay_steps(run_dir)?;
    if steps.is_empty() {
        return Err(Error::Validation(format!(
            "no replay files under {}; train with io.record_replay = true",
            run_dir.join(REPLAY_DIR).display()
        )));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for t in steps {
        let r = load_replay(run_dir, t)?;
        let vals = r
            .groups
            .iter()
            .map(|g| analysis::diversity(&g.tokens))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((t, vals.iter().sum::<f64>() / vals.len().max(1) as f64));
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    w.write_record(["step", "diversity"]).map_err(|e| csv_err(out, e))?;
    for (t, d) in &rows {
        w.write_record([t.to_string(), d.to_string()])
            .map_err(|e| csv_err(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub t: usize,
    pub delta_t: usize,
    pub r_clean: f64,
    pub r_noisy: f64,
    pub anchor_norm: f64,
}

impl From<&GradReport> for GradRow {
    fn from(g: &GradReport) -> Self {
        Self {
            t: g.t,
            delta_t: g.delta_t,
            r_clean: g.r_clean,
            r_noisy: g.r_noisy,
            anchor_norm: g.anchor.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Gradient reports for every checkpoint pair `(t, t + delta_t)` in a run.
pub fn gradient_reports(
    run_dir: &Path,
    delta_t: usize,
    runs: usize,
    selection: &[&str],
) -> Result<Vec<GradReport>> {
    if delta_t == 0 {
        return Err(Error::Config("delta_t must be >= 1".into()));
    }
    let cfg = read_run_config(run_dir)?;
    let ckpts = checkpoint_steps(run_dir)?;
    let mut reports = Vec::new();
    for &t in &ckpts {
        if !ckpts.contains(&(t + delta_t)) {
            continue;
        }
        let replay = (t + 1..=t + delta_t)
            .map(|s| {
                if replay_path(run_dir, s).is_file() {
                    load_replay(run_dir, s)
                } else {
                    Err(Error::Validation(format!(
                        "missing replay for steps {}..={} (step {s} not recorded)",
                        t + 1,
                        t + delta_t
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let a: Checkpoint = load_checkpoint(&checkpoint_path(run_dir, t))?;
        let b: Checkpoint = load_checkpoint(&checkpoint_path(run_dir, t + delta_t))?;
        match analysis::grad_report(&a, &b, &replay, &cfg.train, runs, selection) {
            Ok(r) => reports.push(r),
            // all groups degenerate: nothing moved, ratios undefined
            Err(Error::Validation(m)) if m.contains("anchor gradient is zero") => {}
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(Error::Validation(format!(
            "no checkpoint pairs {delta_t} steps apart under {}",
            run_dir.display()
        )));
    }
    Ok(reports)
}

/// Writes `(t, r_clean, r_noisy)` rows to `out` and returns them.
pub fn analyze_gradients(
    run_dir: &Path,
    delta_t: usize,
    runs: usize,
    selection: &[&str],
    out: &Path,
) -> Result<Vec<GradRow>> {
    let rows: Vec<GradRow> = gradient_reports(run_dir, delta_t, runs, selection)?
        .iter()
        .map(GradRow::from)
        .collect();
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    w.write_record(["t", "r_clean", "r_noisy"]).map_err(|e| csv_err(out, e))?;
    for r in &rows {
        w.write_record([r.t.to_string(), r.r_clean.to_string(), r.r_noisy.to_string()])
            .map_err(|e| csv_err(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BtReport {
    #[serde(flatten)]
    pub fit: BtFit,
    pub win_matrix: Vec<Vec<f64>>,
}

pub fn read_comparisons(path: &Path) -> Result<Vec<Comparison>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Fit Bradley–Terry strengths from a comparisons JSONL file; writes the
/// JSON report to `out`.
pub fn analyze_bt(input: &Path, out: &Path) -> Result<BtReport> {
    let fit = bt_fit(&read_comparisons(input)?)?;
    let report = BtReport {
        win_matrix: fit.win_matrix(),
        fit,
    };
    write_json(out, &report)?;
    Ok(report)
}

/// Evaluate a stored checkpoint at each strength.
pub fn eval_checkpoint(
    ckpt: &Path,
    task: &TaskSpec,
    n_eval: usize,
    strengths: &[f64],
    kind: DistortionKind,
    seed: u64,
) -> Result<Vec<EvalPoint>> {
    let c = load_checkpoint(ckpt)?;
    strengths
        .iter()
        .map(|&s| {
            evaluate_with(&c.params, task, n_eval, kind, s, seed).map(|accuracy| EvalPoint {
                strength: s,
                accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstanceMeta {
    pub query_shape: usize,
    pub truth: usize,
    pub seed: u64,
}

/// Write `count` instances as `instance-{i}.pgm` plus a JSON sidecar each.
pub fn dump_instances(task: &TaskSpec, seed: u64, count: usize, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for i in 0..count {
        let s = crate::rng::derive_seed(seed, &[i as u64]);
        let inst = sample_instance(task, s)?;
        inst.image.write_pgm(&dir.join(format!("instance-{i}.pgm")))?;
        write_json(
            &dir.join(format!("instance-{i}.json")),
            &InstanceMeta {
                query_shape: inst.query_shape,
                truth: inst.truth,
                seed: s,
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreviewFile {
    pub path: PathBuf,
    pub strength: f64,
    pub psnr: f64,
}

/// Render one instance at each strength as `{kind}-{strength}.pgm`.
pub fn distort_preview(
    task: &TaskSpec,
    seed: u64,
    kind: DistortionKind,
    strengths: &[f64],
    dir: &Path,
) -> Result<Vec<PreviewFile>> {
    create_dir(dir)?;
    let inst = sample_instance(task, seed)?;
    strengths
        .iter()
        .map(|&s| {
            let img = apply_distortion(&inst.image, kind, s, seed)?;
            let path = dir.join(format!("{}-{}.pgm", kind.name(), s));
            img.write_pgm(&path)?;
            let psnr = if img.width() == inst.image.width() && img.height() == inst.image.height()
            {
                psnr(&inst.image, &img)?
            } else {
                f64::NAN
            };
            Ok(PreviewFile {
                path,
                strength: s,
                psnr,
            })
        })
        .collect()
}
