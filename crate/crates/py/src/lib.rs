//! Python bindings: rasters, distortions, schedules, task sampling, the
//! policy, advantages, diversity, Bradley–Terry and file-backed training.

use std::path::PathBuf;

use noisyrollout::analysis::{self, Comparison, Outcome};
use noisyrollout::config::ExperimentConfig;
use noisyrollout::env::{self, TaskInstance, TaskSpec, Token};
use noisyrollout::error::Error;
use noisyrollout::experiment::{self, Arm};
use noisyrollout::grpo::{self, AdvVariant};
use noisyrollout::policy::{self, CheckpointMeta, PolicyDims, PolicyParams};
use noisyrollout::raster::{self, DistortionKind};
use noisyrollout::schedule::ScheduleSpec;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Range(_) | Error::Validation(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tokens_from(ids: &[usize]) -> PyResult<Vec<Token>> {
    ids.iter()
        .map(|&i| Token::from_id(i).ok_or_else(|| PyValueError::new_err(format!("token id {i} out of range"))))
        .collect()
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.id()).collect()
}

fn kind(name: &str) -> PyResult<DistortionKind> {
    name.parse().map_err(to_py)
}

/// Grayscale image with pixels in [0, 1], row-major.
#[pyclass(module = "noisyrollout", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Raster {
    inner: raster::Raster,
}

#[pymethods]
impl Raster {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Self> {
        raster::Raster::from_pixels(width, height, pixels)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_pgm(data: &[u8]) -> PyResult<Self> {
        raster::Raster::from_pgm(data).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn total_intensity(&self) -> f64 {
        self.inner.total_intensity()
    }

    fn to_pgm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_pgm())
    }

    #[pyo3(signature = (kind, strength, seed = 0))]
    fn distort(&self, kind: &str, strength: f64, seed: u64) -> PyResult<Raster> {
        raster::apply_distortion(&self.inner, self::kind(kind)?, strength, seed)
            .map(|inner| Raster { inner })
            .map_err(to_py)
    }

    fn psnr(&self, other: &Raster) -> PyResult<f64> {
        raster::psnr(&self.inner, &other.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Raster({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Noise-strength annealing schedule.
#[pyclass(module = "noisyrollout", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Schedule {
    spec: ScheduleSpec,
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    #[pyo3(signature = (alpha0 = 500.0, gamma_mid = 40.0, lambda_steep = 30.0))]
    fn sigmoid(alpha0: f64, gamma_mid: f64, lambda_steep: f64) -> PyResult<Self> {
        Self::checked(ScheduleSpec::sigmoid(alpha0, gamma_mid, lambda_steep))
    }

    #[staticmethod]
    #[pyo3(signature = (alpha0 = 500.0, p_exp = 3.0))]
    fn power(alpha0: f64, p_exp: f64) -> PyResult<Self> {
        Self::checked(ScheduleSpec::power(alpha0, p_exp))
    }

    #[staticmethod]
    #[pyo3(signature = (alpha0 = 500.0, decay = 0.98))]
    fn exponential(alpha0: f64, decay: f64) -> PyResult<Self> {
        Self::checked(ScheduleSpec::exponential(alpha0, decay))
    }

    #[staticmethod]
    fn constant(alpha0: f64) -> PyResult<Self> {
        Self::checked(ScheduleSpec::constant(alpha0))
    }

    fn __call__(&self, t: usize, t_max: usize) -> PyResult<f64> {
        self.spec.eval(t, t_max).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.spec)
    }
}

impl Schedule {
    fn checked(spec: ScheduleSpec) -> PyResult<Self> {
        spec.validate().map_err(to_py)?;
        Ok(Self { spec })
    }
}

/// One GlyphCount question: count the query glyph in the image.
#[pyclass(module = "noisyrollout", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Instance {
    inner: TaskInstance,
}

#[pymethods]
impl Instance {
    #[getter]
    fn image(&self) -> Raster {
        Raster {
            inner: self.inner.image.clone(),
        }
    }

    #[getter]
    fn query_shape(&self) -> usize {
        self.inner.query_shape
    }

    #[getter]
    fn query_name(&self) -> &'static str {
        env::SHAPE_NAMES[self.inner.query_shape]
    }

    #[getter]
    fn truth(&self) -> usize {
        self.inner.truth
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Reward for a token-id sequence.
    fn reward(&self, tokens: Vec<usize>) -> PyResult<f64> {
        Ok(env::reward(&self.inner, &tokens_from(&tokens)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance(query={}, truth={}, seed={})",
            env::SHAPE_NAMES[self.inner.query_shape],
            self.inner.truth,
            self.inner.seed
        )
    }
}

#[pyfunction]
#[pyo3(signature = (seed, grid = 32, shapes = 3, max_per_shape = 5, max_len = 6))]
fn sample_instance(
    seed: u64,
    grid: usize,
    shapes: usize,
    max_per_shape: usize,
    max_len: usize,
) -> PyResult<Instance> {
    let spec = TaskSpec {
        grid,
        shapes,
        max_per_shape,
        max_len,
    };
    env::sample_instance(&spec, seed)
        .map(|inner| Instance { inner })
        .map_err(to_py)
}

#[pyfunction]
fn encode_answer(n: u64) -> Vec<usize> {
    ids(&env::encode_answer(n))
}

#[pyfunction]
fn parse_answer(tokens: Vec<usize>) -> PyResult<Option<u64>> {
    Ok(env::parse_answer(&tokens_from(&tokens)?))
}

/// Token-level autoregressive policy over a frozen image projection.
#[pyclass(module = "noisyrollout", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Policy {
    params: PolicyParams,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (seed = 0, grid = 32, shapes = 3, max_len = 6, features = 64, hidden = 64))]
    fn new(
        seed: u64,
        grid: usize,
        shapes: usize,
        max_len: usize,
        features: usize,
        hidden: usize,
    ) -> PyResult<Self> {
        let dims = PolicyDims {
            features,
            hidden,
            ..PolicyDims::new(grid, shapes, max_len)
        };
        policy::init_policy(dims, seed)
            .map(|params| Self { params })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        policy::load_checkpoint(&path)
            .map(|c| Self { params: c.params })
            .map_err(to_py)
    }

    #[pyo3(signature = (path, step = 0, seed = 0))]
    fn save(&self, path: PathBuf, step: usize, seed: u64) -> PyResult<()> {
        let meta = CheckpointMeta {
            global_step: step,
            master_seed: seed,
        };
        policy::save_checkpoint(&path, &self.params, meta).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.weights.len()
    }

    fn greedy(&self, image: &Raster, query_shape: usize) -> PyResult<Vec<usize>> {
        policy::greedy_decode(&self.params, &image.inner, query_shape)
            .map(|t| ids(&t))
            .map_err(to_py)
    }

    /// Sample a trajectory; returns `(token_ids, logprobs)`.
    #[pyo3(signature = (image, query_shape, temperature = 1.0, seed = 0))]
    fn sample(
        &self,
        image: &Raster,
        query_shape: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = policy::sample_trajectory(&self.params, &image.inner, query_shape, temperature, seed)
            .map_err(to_py)?;
        Ok((ids(&t.tokens), t.old_logprobs_gen))
    }

    fn logprobs(&self, image: &Raster, query_shape: usize, tokens: Vec<usize>) -> PyResult<Vec<f64>> {
        policy::logprobs_under(&self.params, &image.inner, query_shape, &tokens_from(&tokens)?)
            .map_err(to_py)
    }

    /// Greedy accuracy on fresh instances.
    #[pyo3(signature = (n_eval = 1000, kind = "gaussian", strength = 0.0, seed = 0, grid = 32, shapes = 3, max_per_shape = 5, max_len = 6))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        n_eval: usize,
        kind: &str,
        strength: f64,
        seed: u64,
        grid: usize,
        shapes: usize,
        max_per_shape: usize,
        max_len: usize,
    ) -> PyResult<f64> {
        let spec = TaskSpec {
            grid,
            shapes,
            max_per_shape,
            max_len,
        };
        grpo::evaluate_with(&self.params, &spec, n_eval, self::kind(kind)?, strength, seed)
            .map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (rewards, std_norm = true))]
fn advantages(rewards: Vec<f64>, std_norm: bool) -> PyResult<Vec<f64>> {
    let v = if std_norm {
        AdvVariant::StdNorm
    } else {
        AdvVariant::MeanOnly
    };
    grpo::compute_advantages(&rewards, v).map_err(to_py)
}

#[pyfunction]
fn embed(tokens: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(analysis::embed_trajectory(&tokens_from(&tokens)?).vector)
}

#[pyfunction]
fn diversity(trajectories: Vec<Vec<usize>>) -> PyResult<f64> {
    let toks = trajectories
        .iter()
        .map(|t| tokens_from(t))
        .collect::<PyResult<Vec<_>>>()?;
    analysis::diversity(&toks).map_err(to_py)
}

#[pyfunction]
fn projection_ratio(g_sub: Vec<f64>, anchor: Vec<f64>) -> PyResult<f64> {
    analysis::projection_ratio(&g_sub, &anchor).map_err(to_py)
}

/// Fit Bradley–Terry strengths from `(first, second, outcome)` triples,
/// outcome one of "first", "second", "tie". Returns `{model: strength}`.
#[pyfunction]
fn bt_fit(comparisons: Vec<(String, String, String)>) -> PyResult<Vec<(String, f64)>> {
    let cmp = comparisons
        .into_iter()
        .map(|(a, b, o)| {
            let o = match o.as_str() {
                "first" => Outcome::FirstWins,
                "second" => Outcome::SecondWins,
                "tie" => Outcome::Tie,
                other => return Err(PyValueError::new_err(format!("unknown outcome {other:?}"))),
            };
            Ok(Comparison::new(a, b, o))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let fit = analysis::bt_fit(&cmp).map_err(to_py)?;
    Ok(fit.models.iter().cloned().zip(fit.strengths.iter().copied()).collect())
}

/// Train one arm into `out_dir`; returns the summary as JSON text.
#[pyfunction]
#[pyo3(signature = (out_dir, config = "", overrides = Vec::new(), vanilla = false))]
fn train(
    py: Python<'_>,
    out_dir: PathBuf,
    config: &str,
    overrides: Vec<String>,
    vanilla: bool,
) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_toml_with(config, &overrides).map_err(to_py)?;
    cfg.io.out_dir = out_dir;
    let arm = if vanilla { Arm::Vanilla } else { Arm::Noisy };
    let r = py
        .detach(|| experiment::run_training(&cfg, arm))
        .map_err(to_py)?;
    Ok(format!(
        "{{\"untrained_acc\": {}, \"warmup_acc\": {}, \"final_eval\": [{}]}}",
        r.summary.untrained_acc,
        r.summary.warmup_acc,
        r.summary
            .final_eval
            .iter()
            .map(|p| format!("[{}, {}]", p.strength, p.accuracy))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

#[pymodule]
#[pyo3(name = "noisyrollout")]
fn noisyrollout_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Raster>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Instance>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(sample_instance, m)?)?;
    m.add_function(wrap_pyfunction!(encode_answer, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(projection_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(bt_fit, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("VOCAB_SIZE", env::VOCAB_SIZE)?;
    Ok(())
}
