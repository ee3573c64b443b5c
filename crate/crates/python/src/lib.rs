//! Python bindings for the federated-learning simulator.
//!
//! The module exposes the main operations at three levels:
//!   - `Simulator`: step a federation round by round from Python;
//!   - `simulate`: run a whole experiment to its artifact directory;
//!   - direct calls: robust aggregation, trigger stamping, config
//!     validation, and the summary metrics.
//!
//! Compound results cross the boundary as plain dicts/lists (via JSON), so
//! no Python-side schema is required.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use fedsim_core::config::parse_config_str;
use fedsim_core::data::{apply_trigger, PatchPixel, TriggerKind, TriggerSpec};
use fedsim_core::defenses::{
    aggregate, AggregationRule, ClientUpdate, FoolsGoldState, UpdateView,
};
use fedsim_core::engine::{run_experiment, Engine, RunOptions};
use fedsim_core::metrics::{asr_t, h_asr, lifespan};
use fedsim_core::params::ParamVector;

/// Serializes any `Serialize` value and rebuilds it as Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_string(value)
        .map_err(|err| PyRuntimeError::new_err(format!("serialization failed: {err}")))?;
    py.import("json")?.getattr("loads")?.call1((json,))
}

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn runtime_err(err: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(err.to_string())
}

// ---------------------------------------------------------------------------
// Simulator: round-by-round stepping
// ---------------------------------------------------------------------------

/// A fully prepared experiment that advances one federation round per call.
///
/// Two simulators built from the same config produce bit-identical series
/// regardless of the worker count.
#[pyclass]
struct Simulator {
    engine: Engine,
}

#[pymethods]
impl Simulator {
    #[new]
    #[pyo3(signature = (config_toml, overrides = Vec::new()))]
    fn new(config_toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = parse_config_str(config_toml, &overrides).map_err(value_err)?;
        let engine = Engine::new(cfg).map_err(value_err)?;
        Ok(Simulator { engine })
    }

    /// Rounds completed so far.
    #[getter]
    fn next_round(&self) -> u64 {
        self.engine.next_round()
    }

    /// Total rounds the schedule will run.
    #[getter]
    fn total_rounds(&self) -> u64 {
        self.engine.schedule().total()
    }

    /// Runs one round and returns its record (round, phase, selected
    /// clients, accuracy, attack success rate, detection, timings) as a dict.
    fn run_round<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let engine = &mut self.engine;
        let record = py
            .detach(|| engine.run_round())
            .map_err(runtime_err)?;
        to_py(py, &record)
    }

    /// Per-round clean test accuracy, one entry per completed round.
    fn accuracy(&self) -> Vec<f64> {
        self.engine.acc_series().to_vec()
    }

    /// Per-round attack success rate on the triggered test set.
    fn attack_success(&self) -> Vec<f64> {
        self.engine.asr_series().to_vec()
    }

    /// The flattened global model parameters.
    fn model(&self) -> Vec<f64> {
        self.engine.theta().values().to_vec()
    }

    /// The end-of-run metric summary for the rounds completed so far.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.engine.summary())
    }
}

// ---------------------------------------------------------------------------
// Whole-experiment runner
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateResult {
    run_dir: String,
    completed_rounds: u64,
    total_rounds: u64,
    summary: Option<fedsim_core::engine::RunSummary>,
    acc: Vec<f64>,
    asr: Vec<f64>,
}

/// Runs an experiment end to end, writing the artifact directory
/// (config echo, round log, detections, checkpoints, summary), and returns
/// the summary plus both per-round series.
#[pyfunction]
#[pyo3(signature = (config_toml, run_dir, overrides = Vec::new(), force = false, resume_from = None, stop_after = None))]
fn simulate<'py>(
    py: Python<'py>,
    config_toml: &str,
    run_dir: &str,
    overrides: Vec<String>,
    force: bool,
    resume_from: Option<u64>,
    stop_after: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config_str(config_toml, &overrides).map_err(value_err)?;
    let opts = RunOptions {
        run_dir: run_dir.into(),
        force,
        resume_from,
        stop_after,
    };
    let mut acc = Vec::new();
    let mut asr = Vec::new();
    let outcome = py
        .detach(|| {
            run_experiment(cfg, &opts, |record| {
                acc.push(record.acc);
                asr.push(record.asr);
            })
        })
        .map_err(runtime_err)?;
    let result = SimulateResult {
        run_dir: outcome.run_dir.display().to_string(),
        completed_rounds: outcome.completed_rounds,
        total_rounds: outcome.total_rounds,
        summary: outcome.summary,
        acc,
        asr,
    };
    to_py(py, &result)
}

/// Parses and validates a config, returning the normalized TOML with every
/// defaulted field made explicit. Raises ValueError on any problem.
#[pyfunction]
#[pyo3(signature = (config_toml, overrides = Vec::new()))]
fn validate_config(config_toml: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = parse_config_str(config_toml, &overrides).map_err(value_err)?;
    toml::to_string_pretty(&cfg).map_err(runtime_err)
}

// ---------------------------------------------------------------------------
// Direct operations: aggregation, triggers, metrics
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AggregateResult {
    update: Vec<f64>,
    includes_server_lr: bool,
    selected: Option<Vec<usize>>,
    weights: Option<Vec<f64>>,
    converged: Option<bool>,
    fell_back_to_fedavg: bool,
}

/// Applies one robust aggregation rule to a list of client update vectors
/// (client ids are the list positions). Rule-specific parameters are
/// keyword arguments; missing required ones raise ValueError.
#[pyfunction]
#[pyo3(signature = (rule, updates, server_lr = 1.0, f = None, m = None, trim_k = None, tol = None, max_iter = None, threshold = None, bound = None))]
#[allow(clippy::too_many_arguments)]
fn aggregate_updates<'py>(
    py: Python<'py>,
    rule: &str,
    updates: Vec<Vec<f64>>,
    server_lr: f64,
    f: Option<usize>,
    m: Option<usize>,
    trim_k: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    threshold: Option<f64>,
    bound: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let need = |opt: Option<usize>, name: &str| {
        opt.ok_or_else(|| PyValueError::new_err(format!("rule {rule:?} needs {name}=")))
    };
    let rule = match rule {
        "fedavg" => AggregationRule::FedAvg,
        "median" => AggregationRule::Median,
        "trimmed_mean" => AggregationRule::TrimmedMean {
            trim_k: need(trim_k, "trim_k")?,
        },
        "krum" => AggregationRule::Krum { f: need(f, "f")? },
        "multi_krum" => AggregationRule::MultiKrum {
            f: need(f, "f")?,
            m: need(m, "m")?,
        },
        "rfa" => AggregationRule::Rfa {
            tol: tol.unwrap_or(fedsim_core::defenses::RFA_DEFAULT_TOL),
            max_iter: max_iter.unwrap_or(fedsim_core::defenses::RFA_DEFAULT_MAX_ITER),
        },
        "foolsgold" => AggregationRule::FoolsGold,
        "rlr" => AggregationRule::Rlr {
            threshold: threshold
                .ok_or_else(|| PyValueError::new_err("rule 'rlr' needs threshold="))?,
        },
        "norm_clipping" => AggregationRule::NormClipping {
            bound: bound
                .ok_or_else(|| PyValueError::new_err("rule 'norm_clipping' needs bound="))?,
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown rule {other:?}; expected one of fedavg, median, trimmed_mean, krum, \
                 multi_krum, rfa, foolsgold, rlr, norm_clipping"
            )))
        }
    };
    let owned: Vec<ClientUpdate> = updates
        .into_iter()
        .enumerate()
        .map(|(client_id, values)| ClientUpdate {
            client_id,
            delta: ParamVector::flat(values),
            declared_num_samples: 1,
            train_wall_ms: 0,
            truth_is_malicious: false,
        })
        .collect();
    let views: Vec<UpdateView> = owned.iter().map(|u| u.view()).collect();
    let mut fg = FoolsGoldState::default();
    let outcome = aggregate(rule, &views, server_lr, &mut fg).map_err(value_err)?;
    to_py(
        py,
        &AggregateResult {
            update: outcome.update.into_values(),
            includes_server_lr: outcome.includes_server_lr,
            selected: outcome.selected,
            weights: outcome.weights,
            converged: outcome.converged,
            fell_back_to_fedavg: outcome.fell_back_to_fedavg,
        },
    )
}

/// Stamps a pixel patch onto one raw-space sample (values in [0,1]) and
/// returns `(poisoned_sample, target_label)`. Patch pixels are
/// `(row, col, channel, value)` tuples; `image_shape` is
/// `(height, width, channels)` or None for flat feature vectors.
#[pyfunction]
#[pyo3(signature = (sample, target_class, patch, image_shape = None))]
fn poison_sample(
    sample: Vec<f64>,
    target_class: usize,
    patch: Vec<(usize, usize, usize, f64)>,
    image_shape: Option<(usize, usize, usize)>,
) -> PyResult<(Vec<f64>, usize)> {
    let pixels: Vec<PatchPixel> = patch
        .into_iter()
        .map(|(row, col, channel, value)| PatchPixel {
            row,
            col,
            channel,
            value,
        })
        .collect();
    let trigger =
        TriggerSpec::pattern(TriggerKind::FixedPattern, target_class, pixels).map_err(value_err)?;
    apply_trigger(&sample, image_shape, &trigger).map_err(value_err)
}

/// Mean attack success rate over the last `t` entries of the attack-window
/// series.
#[pyfunction]
fn tail_asr(series: Vec<f64>, t: usize) -> PyResult<f64> {
    asr_t(&series, t).map_err(value_err)
}

/// Highest attack success rate across the series.
#[pyfunction]
fn peak_asr(series: Vec<f64>) -> PyResult<f64> {
    h_asr(&series).map_err(value_err)
}

/// Rounds the attack persists after it stops: the leading run of
/// post-attack entries at or above `threshold`, or every such entry with
/// `count_all=True`.
#[pyfunction]
#[pyo3(signature = (post_series, threshold = 0.5, count_all = false))]
fn trigger_lifespan(post_series: Vec<f64>, threshold: f64, count_all: bool) -> usize {
    lifespan(&post_series, threshold, count_all)
}

#[pymodule]
fn fedsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Simulator>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_updates, m)?)?;
    m.add_function(wrap_pyfunction!(poison_sample, m)?)?;
    m.add_function(wrap_pyfunction!(tail_asr, m)?)?;
    m.add_function(wrap_pyfunction!(peak_asr, m)?)?;
    m.add_function(wrap_pyfunction!(trigger_lifespan, m)?)?;
    Ok(())
}
