use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use speckv_core::codec::bench::{bench, parse_profile};
use speckv_core::codec::{self, CompressedBlock, KvBlock, Scheme};
use speckv_core::config;
use speckv_core::sim::{self, ReportFormat, SimError, SimMetrics, Value};
use speckv_core::timing::{self, LatencyParams};
use speckv_core::validate as oracle;

create_exception!(speckv, ConfigError, PyValueError);

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::Config(c) => ConfigError::new_err(c.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scheme(name: &str) -> PyResult<Scheme> {
    name.parse().map_err(value_err)
}

fn format(name: &str) -> PyResult<ReportFormat> {
    name.parse().map_err(value_err)
}

/// Full simulator configuration. Keys follow the config-file form, e.g.
/// `cfg.set("serving.prefetch_depth", "8")`.
#[pyclass(name = "SimConfig", module = "speckv", skip_from_py_object)]
#[derive(Clone)]
struct PySimConfig {
    inner: config::SimConfig,
}

#[pymethods]
impl PySimConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: config::SimConfig::default(),
        }
    }

    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: config::SimConfig::desk(),
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        config::SimConfig::parse(text)
            .map(|inner| Self { inner })
            .map_err(|e| ConfigError::new_err(e.to_string()))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Returns a copy with `key = value` applied and the whole config revalidated.
    fn set(&self, key: &str, value: &str) -> PyResult<Self> {
        let mut text: String = self
            .inner
            .to_text()
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some(key))
            .map(|l| format!("{l}\n"))
            .collect();
        text.push_str(&format!("{key} = {value}\n"));
        Self::parse(&text)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn max_tokens(&self) -> Option<u64> {
        self.inner.max_tokens
    }

    #[setter]
    fn set_max_tokens(&mut self, n: Option<u64>) {
        self.inner.max_tokens = n;
    }

    #[getter]
    fn prefetch_depth(&self) -> u32 {
        self.inner.serving.prefetch_depth
    }

    #[setter]
    fn set_prefetch_depth(&mut self, k: u32) {
        self.inner.serving.prefetch_depth = k;
    }

    fn __repr__(&self) -> String {
        format!(
            "SimConfig(layers={}, batch={}, k={}, seed={})",
            self.inner.geometry.layers, self.inner.serving.batch_size, self.inner.serving.prefetch_depth, self.inner.seed
        )
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &SimMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in m.fields() {
        match v {
            Value::Rate(r) => d.set_item(k, r)?,
            Value::Count(n) => d.set_item(k, n)?,
            Value::Flag(b) => d.set_item(k, b)?,
        }
    }
    Ok(d)
}

/// Runs one simulation; returns the metrics as a dict.
#[pyfunction]
fn run<'py>(py: Python<'py>, cfg: &PySimConfig) -> PyResult<Bound<'py, PyDict>> {
    let c = cfg.inner.clone();
    let m = py.detach(move || sim::run(&c)).map_err(sim_err)?;
    metrics_dict(py, &m)
}

/// Runs one simulation and serializes the report (`csv` or `json`).
#[pyfunction]
#[pyo3(signature = (cfg, format = "csv"))]
fn report(py: Python<'_>, cfg: &PySimConfig, format: &str) -> PyResult<String> {
    let f = self::format(format)?;
    let c = cfg.inner.clone();
    let m = py.detach(move || sim::run(&c)).map_err(sim_err)?;
    Ok(sim::report(&m, f))
}

#[pyfunction]
#[pyo3(signature = (cfg, arms = vec![1, 2, 4, 8, 16]))]
fn sweep_k<'py>(py: Python<'py>, cfg: &PySimConfig, arms: Vec<u32>) -> PyResult<Bound<'py, PyList>> {
    let c = cfg.inner.clone();
    let rows = py.detach(move || sim::sweep_k(&c, &arms)).map_err(sim_err)?;
    let out = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("k", r.k)?;
        d.set_item("hit_rate", r.hit_rate)?;
        d.set_item("coverage", r.coverage)?;
        d.set_item("precision", r.precision)?;
        d.set_item("throughput_tokens_per_s", r.throughput_tokens_per_s)?;
        d.set_item("latency_avg_ms", r.latency_avg_ms)?;
        d.set_item("effective_access_latency_ns", r.effective_access_latency_ns)?;
        out.append(d)?;
    }
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (engines = vec![1, 2, 3, 4], seed = 0))]
fn sweep_engines<'py>(py: Python<'py>, engines: Vec<u32>, seed: u64) -> PyResult<Bound<'py, PyList>> {
    if engines.contains(&0) {
        return Err(PyValueError::new_err("engine counts must be positive"));
    }
    let rows = py.detach(move || sim::sweep_engines(&LatencyParams::default(), seed, &engines));
    let out = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("engines", r.engines)?;
        d.set_item("throughput_gbps", r.throughput_gbps)?;
        d.set_item("efficiency", r.efficiency)?;
        d.set_item("saturated", r.saturated)?;
        d.set_item("avg_ns", r.avg_ns)?;
        d.set_item("p99_ns", r.p99_ns)?;
        out.append(d)?;
    }
    Ok(out)
}

/// Compresses a row-major `rows x cols` block; returns the serialized block.
#[pyfunction]
fn compress<'py>(py: Python<'py>, values: Vec<f64>, rows: usize, cols: usize, scheme: &str) -> PyResult<Bound<'py, PyBytes>> {
    let b = KvBlock::new(rows, cols, values).map_err(value_err)?;
    let cb = codec::compress(&b, self::scheme(scheme)?);
    Ok(PyBytes::new(py, &cb.to_bytes()))
}

/// Inverse of `compress`: `(rows, cols, values)`.
#[pyfunction]
fn decompress(data: &[u8]) -> PyResult<(usize, usize, Vec<f64>)> {
    let cb = CompressedBlock::from_bytes(data).map_err(value_err)?;
    let b = codec::decompress(&cb).map_err(value_err)?;
    Ok((b.rows(), b.cols(), b.values().to_vec()))
}

/// Stored-size ratio of `scheme` on a block, header included.
#[pyfunction]
fn measure_ratio(values: Vec<f64>, rows: usize, cols: usize, scheme: &str) -> PyResult<f64> {
    let b = KvBlock::new(rows, cols, values).map_err(value_err)?;
    Ok(codec::measure_ratio(&b, self::scheme(scheme)?))
}

#[pyfunction]
#[pyo3(signature = (scheme, profile = "default", rows = 4, cols = 512, blocks = 16, seed = 0))]
fn codec_bench<'py>(
    py: Python<'py>,
    scheme: &str,
    profile: &str,
    rows: usize,
    cols: usize,
    blocks: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = parse_profile(profile).map_err(value_err)?;
    let r = bench(&p, self::scheme(scheme)?, rows, cols, blocks, seed);
    let d = PyDict::new(py);
    d.set_item("scheme", r.scheme.name())?;
    d.set_item("mean_target", r.mean_target)?;
    d.set_item("mean_ratio", r.mean_ratio)?;
    d.set_item("aggregate_ratio", r.aggregate_ratio)?;
    d.set_item("bypass", r.bypass)?;
    d.set_item("quality", r.quality)?;
    d.set_item("layer_ratios", r.layers.iter().map(|l| l.ratio).collect::<Vec<_>>())?;
    Ok(d)
}

/// The formula oracle suite as `(module, name, expected, got, passed)` tuples.
#[pyfunction]
fn validate() -> Vec<(String, String, String, String, bool)> {
    oracle::run_all()
        .into_iter()
        .map(|c| (c.module.to_string(), c.name, c.expected, c.got, c.pass))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (h, hit_ns = 285.0, miss_ns = 1850.0))]
fn effective_access_latency(h: f64, hit_ns: f64, miss_ns: f64) -> f64 {
    timing::effective_access_latency(h, hit_ns, miss_ns)
}

/// True when `λ·k·S < BW·H`.
#[pyfunction]
fn is_stable(lambda_: f64, k: f64, entry_bytes: f64, bw: f64, h: f64) -> bool {
    timing::stability_check(lambda_, k, entry_bytes, bw, h) == timing::Stability::Stable
}

#[pymodule]
fn speckv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<PySimConfig>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_k, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_engines, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(decompress, m)?)?;
    m.add_function(wrap_pyfunction!(measure_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(codec_bench, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(effective_access_latency, m)?)?;
    m.add_function(wrap_pyfunction!(is_stable, m)?)?;
    Ok(())
}
