//! `nrlab` command-line driver.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use noisyrollout::config::ExperimentConfig;
use noisyrollout::env::TaskSpec;
use noisyrollout::error::Error;
use noisyrollout::experiment::{self, Arm};
use noisyrollout::raster::DistortionKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_VAR: &str = "NR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nrlab", version, about = "NoisyRollout experiments on GlyphCount")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.n2=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides io.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.io.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one NoisyRollout run.
    Train(ConfigArgs),
    /// Evaluate a checkpoint, or dump sample instances.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Distortion applied at evaluation time.
        #[arg(long, default_value = "gaussian")]
        kind: String,
        /// Comma-separated strengths; defaults to eval.eval_strengths.
        #[arg(long, value_delimiter = ',')]
        strengths: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write this many instances as PGM + JSON into --out instead of evaluating.
        #[arg(long)]
        dump: Option<usize>,
    },
    /// Run NoisyRollout and vanilla GRPO side by side for each seed.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Offline analyses over stored run artefacts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Render one instance at several distortion strengths.
    DistortPreview {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gaussian")]
        kind: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 300.0, 500.0, 700.0, 900.0])]
        strengths: Vec<f64>,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
        /// Task config to sample from; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Per-step rollout diversity from replay files.
    Diversity {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean/noisy projection ratios for each checkpoint pair.
    Gradients {
        run: PathBuf,
        #[arg(long, default_value_t = 5)]
        delta_t: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Comma-separated tensor names.
        #[arg(long, value_delimiter = ',')]
        params: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bradley–Terry fit over a comparisons JSONL file.
    Bt {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::AtStep { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

/// Size the global rayon pool from `NR_THREADS`.
pub fn init_threads(value: Option<&str>) -> Result<(), Error> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn default_out(run: &Path, name: &str) -> PathBuf {
    run.join(name)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_task(config: Option<&Path>, overrides: &[String]) -> Result<TaskSpec, Error> {
    Ok(ExperimentConfig::load(config, overrides)?.task)
}

pub fn cmd_train(args: &ConfigArgs) -> Result<(), Error> {
    let cfg = args.load()?;
    let r = experiment::run_training(&cfg, Arm::Noisy)?;
    println!("run written to {}", cfg.io.out_dir.display());
    println!("untrained accuracy {:.4}", r.summary.untrained_acc);
    for p in &r.summary.final_eval {
        println!("eval strength {:>6}: accuracy {:.4}", p.strength, p.accuracy);
    }
    Ok(())
}

pub fn cmd_compare(args: &ConfigArgs, seeds: &[u64]) -> Result<(), Error> {
    let cfg = args.load()?;
    let r = experiment::run_compare(&cfg, seeds)?;
    println!("comparison written to {}", cfg.io.out_dir.display());
    for (name, m) in [("noisy", &r.noisy), ("vanilla", &r.vanilla)] {
        for p in &m.final_eval {
            println!("{name:<8} strength {:>6}: accuracy {:.4}", p.strength, p.accuracy);
        }
        if let Some(d) = m.early_diversity {
            println!("{name:<8} diversity steps 1-{}: {d:.4}", r.early_steps);
        }
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: Option<&Path>,
    args: &ConfigArgs,
    kind: &str,
    strengths: &[f64],
    seed: u64,
    dump: Option<usize>,
) -> Result<(), Error> {
    let kind: DistortionKind = kind.parse()?;
    let cfg = args.load()?;
    if let Some(n) = dump {
        experiment::dump_instances(&cfg.task, seed, n, &cfg.io.out_dir)?;
        println!("{n} instances written to {}", cfg.io.out_dir.display());
        return Ok(());
    }
    let ckpt = checkpoint
        .ok_or_else(|| Error::Config("eval needs --checkpoint (or --dump N)".into()))?;
    let strengths = if strengths.is_empty() {
        cfg.eval.eval_strengths.as_slice()
    } else {
        strengths
    };
    let points =
        experiment::eval_checkpoint(ckpt, &cfg.task, cfg.eval.n_eval, strengths, kind, seed)?;
    print_json(&points)
}

pub fn cmd_analyze(cmd: &AnalyzeCommand) -> Result<(), Error> {
    match cmd {
        AnalyzeCommand::Diversity { run, out } => {
            let out = out.clone().unwrap_or_else(|| default_out(run, "diversity.csv"));
            let rows = experiment::analyze_diversity(run, &out)?;
            let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
            print_json(&serde_json::json!({ "steps": rows.len(), "mean_diversity": mean, "csv": out }))
        }
        AnalyzeCommand::Gradients {
            run,
            delta_t,
            runs,
            params,
            out,
        } => {
            let out = out.clone().unwrap_or_else(|| default_out(run, "gradients.csv"));
            let selection: Vec<&str> = if params.is_empty() {
                noisyrollout::analysis::DEFAULT_SELECTION.to_vec()
            } else {
                params.iter().map(String::as_str).collect()
            };
            let rows = experiment::analyze_gradients(run, *delta_t, *runs, &selection, &out)?;
            let mean = |f: fn(&experiment::GradRow) -> f64| {
                let v: Vec<f64> = rows.iter().map(f).filter(|x| x.is_finite()).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let summary = serde_json::json!({
                "delta_t": delta_t,
                "runs": runs,
                "pairs": rows.len(),
                "mean_r_clean": mean(|r| r.r_clean),
                "mean_r_noisy": mean(|r| r.r_noisy),
                "csv": out,
            });
            let json_path = out.with_extension("json");
            let full = serde_json::json!({ "summary": summary, "rows": rows });
            std::fs::write(&json_path, serde_json::to_string_pretty(&full)? + "\n")
                .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
            print_json(&summary)
        }
        AnalyzeCommand::Bt { input, out } => {
            let out = out.clone().unwrap_or_else(|| input.with_extension("bt.json"));
            let r = experiment::analyze_bt(input, &out)?;
            print_json(&r)
        }
    }
}

pub fn cmd_distort_preview(
    seed: u64,
    kind: &str,
    strengths: &[f64],
    out: &Path,
    task: &TaskSpec,
) -> Result<(), Error> {
    let kind: DistortionKind = kind.parse()?;
    if strengths.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config("strengths must be finite and >= 0".into()));
    }
    for f in experiment::distort_preview(task, seed, kind, strengths, out)? {
        println!("{}  psnr {:.3}", f.path.display(), f.psnr);
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval {
            checkpoint,
            cfg,
            kind,
            strengths,
            seed,
            dump,
        } => cmd_eval(checkpoint.as_deref(), cfg, kind, strengths, *seed, *dump),
        Command::Compare { cfg, seeds } => cmd_compare(cfg, seeds),
        Command::Analyze(a) => cmd_analyze(a),
        Command::DistortPreview {
            seed,
            kind,
            strengths,
            out,
            config,
            overrides,
        } => {
            let task = load_task(config.as_deref(), overrides)?;
            cmd_distort_preview(*seed, kind, strengths, out, &task)
        }
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = std::env::var(THREADS_VAR).ok();
    let result = init_threads(threads.as_deref()).and_then(|_| dispatch(&cli));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
