//! Python bindings for the token-pruning pipeline.
//!
//! Grids cross the boundary as flat row-major lists of floats together with
//! their `(height, width, channels)` shape.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cat_prune_core::clustering::{self, FeatureMatrix};
use cat_prune_core::config::ExperimentConfig;
use cat_prune_core::denoiser::{self, RunMode};
use cat_prune_core::metrics::{self, CostModel};
use cat_prune_core::rng::{SeededRng, KMEANS_INIT};
use cat_prune_core::{selector, CatError, TokenGrid, TokenIndexSet};

fn to_py(err: CatError) -> PyErr {
    match err {
        CatError::Io(e) => PyOSError::new_err(e.to_string()),
        CatError::State(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<RunMode> {
    match mode {
        "full" => Ok(RunMode::Full),
        "pruned" => Ok(RunMode::Pruned),
        other => Err(PyValueError::new_err(format!("mode must be 'full' or 'pruned', got '{other}'"))),
    }
}

/// Sampler and pruning settings. Keyword arguments use the config-file keys.
#[pyclass(name = "RunConfig", module = "cat_prune", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: cat_prune_core::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                if matches!(key.as_str(), "out_dir" | "export_latent_pgm" | "record_timing") {
                    return Err(PyValueError::new_err(format!("'{key}' is a CLI-only key")));
                }
                let text = if value.is_none() { "auto".to_string() } else { value.str()?.to_string() };
                cfg.set(&key, &text).map_err(PyValueError::new_err)?;
            }
        }
        cfg.run.validate().map_err(to_py)?;
        Ok(Self { inner: cfg.run })
    }

    /// Parses the `key = value` file format.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse_str(text).map_err(to_py)?;
        Ok(Self { inner: cfg.run })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn noise_channels(&self) -> usize {
        self.inner.noise_channels
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    #[getter]
    fn warmup(&self) -> usize {
        self.inner.warmup
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    fn image_tokens(&self) -> usize {
        self.inner.image_tokens()
    }

    fn budget(&self) -> usize {
        self.inner.budget()
    }

    fn stale_budget(&self) -> usize {
        self.inner.stale_budget()
    }

    fn selected_clusters(&self) -> usize {
        self.inner.selected_clusters()
    }

    /// A copy with some keys changed.
    #[pyo3(signature = (**kwargs))]
    fn replace(&self, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = ExperimentConfig { run: self.inner.clone(), ..ExperimentConfig::default() };
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                let text = if value.is_none() { "auto".to_string() } else { value.str()?.to_string() };
                cfg.set(&key, &text).map_err(PyValueError::new_err)?;
            }
        }
        cfg.run.validate().map_err(to_py)?;
        Ok(Self { inner: cfg.run })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "RunConfig(height={}, width={}, total_steps={}, warmup={}, alpha={}, strategy='{}', seed={})",
            c.height,
            c.width,
            c.total_steps,
            c.warmup,
            c.alpha,
            c.strategy.name(),
            c.seed
        )
    }
}

/// Outcome of one sampler run.
#[pyclass(name = "SampleResult", module = "cat_prune", frozen, skip_from_py_object)]
struct PySampleResult {
    #[pyo3(get)]
    shape: (usize, usize, usize),
    #[pyo3(get)]
    initial_latent: Vec<f64>,
    #[pyo3(get)]
    final_latent: Vec<f64>,
    /// Image tokens recomputed on each step.
    #[pyo3(get)]
    selected_counts: Vec<usize>,
    /// Selected image tokens per pruned step.
    #[pyo3(get)]
    selections: Vec<Vec<usize>>,
    #[pyo3(get)]
    never_selected: Vec<usize>,
    #[pyo3(get)]
    cluster_assignment: Option<Vec<usize>>,
    #[pyo3(get)]
    frequencies: Vec<f64>,
}

/// Runs the sampler; `mode` is `"full"` or `"pruned"`.
#[pyfunction]
#[pyo3(signature = (config, mode = "pruned"))]
fn sample(py: Python<'_>, config: &PyRunConfig, mode: &str) -> PyResult<PySampleResult> {
    let mode = parse_mode(mode)?;
    let cfg = config.inner.clone();
    let trace = py.detach(|| denoiser::sample(&cfg, mode)).map_err(to_py)?;
    let n = cfg.image_tokens();
    Ok(PySampleResult {
        shape: trace.final_latent.shape(),
        initial_latent: trace.initial_latent.data().to_vec(),
        final_latent: trace.final_latent.data().to_vec(),
        selected_counts: trace.steps.iter().map(|s| s.selected_count(n)).collect(),
        selections: trace
            .pruned_steps()
            .filter_map(|s| s.selection.as_ref())
            .map(|s| s.selected.as_slice().to_vec())
            .collect(),
        never_selected: denoiser::never_selected(&trace).as_slice().to_vec(),
        cluster_assignment: trace.clusters.as_ref().map(|c| c.assignment.clone()),
        frequencies: trace.tracker.frequencies().to_vec(),
    })
}

fn grid(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<TokenGrid> {
    TokenGrid::new(shape.0, shape.1, shape.2, data).map_err(to_py)
}

/// L2 norm of each token of a flat `(h, w, c)` grid.
#[pyfunction]
fn token_norms(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Vec<f64>> {
    Ok(cat_prune_core::token_norms(&grid(data, shape)?))
}

/// Indices of the `m` largest scores, ascending; ties go to the lower index.
#[pyfunction]
fn top_k_indices(scores: Vec<f64>, m: usize) -> PyResult<Vec<usize>> {
    Ok(cat_prune_core::top_k_indices(&scores, m).map_err(to_py)?.as_slice().to_vec())
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&x, &y).map_err(to_py)
}

/// MSE, PSNR and max abs difference of `candidate` against `reference`.
#[pyfunction]
fn fidelity<'py>(
    py: Python<'py>,
    reference: Vec<f64>,
    candidate: Vec<f64>,
    shape: (usize, usize, usize),
) -> PyResult<Bound<'py, PyDict>> {
    let f = metrics::fidelity(&grid(reference, shape)?, &grid(candidate, shape)?).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("mse", f.mse)?;
    out.set_item("psnr", f.psnr)?;
    out.set_item("max_abs_diff", f.max_abs_diff)?;
    Ok(out)
}

/// Analytic MACs for a run. `text_overhead` replaces the text tokens with
/// that fraction of the image tokens.
#[pyfunction]
#[pyo3(signature = (config, text_overhead = None))]
fn macs<'py>(py: Python<'py>, config: &PyRunConfig, text_overhead: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let mut model = CostModel::from_config(&config.inner);
    if let Some(fraction) = text_overhead {
        model = model.with_text_overhead(fraction);
    }
    let s = model.macs_total();
    let out = PyDict::new(py);
    out.set_item("full", s.full)?;
    out.set_item("pruned", s.pruned)?;
    out.set_item("ratio", s.ratio)?;
    Ok(out)
}

/// Row-major `(h * w) x dim` positional encoding.
#[pyfunction]
fn positional_encoding(height: usize, width: usize, dim: usize) -> PyResult<Vec<Vec<f64>>> {
    let pe = clustering::PositionalEncoding::new(height, width, dim).map_err(to_py)?;
    Ok((0..height * width).map(|t| pe.row(t).to_vec()).collect())
}

/// k-means++ then Lloyd. Returns `(assignment, centroids, inertia)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0, max_iters = 50))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iters: usize) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(PyValueError::new_err("all points must have the same length"));
    }
    let rows = points.len();
    let features = FeatureMatrix::new(rows, dim, points.into_iter().flatten().collect()).map_err(to_py)?;
    let mut rng = SeededRng::new(seed).substream(KMEANS_INIT);
    let fit = clustering::kmeans(&features, k, &mut rng, max_iters).map_err(to_py)?;
    let centroids = (0..k).map(|c| fit.centroid(c, dim).to_vec()).collect();
    Ok((fit.assignment.clone(), centroids, fit.inertia()))
}

/// EWMA of how often each token has been selected.
#[pyclass(name = "FrequencyTracker", module = "cat_prune", skip_from_py_object)]
struct PyFrequencyTracker {
    inner: selector::FrequencyTracker,
}

#[pymethods]
impl PyFrequencyTracker {
    #[new]
    fn new(decay: f64, tokens: usize) -> PyResult<Self> {
        Ok(Self {
            inner: selector::FrequencyTracker::new(decay, tokens).map_err(to_py)?,
        })
    }

    fn update(&mut self, selected: Vec<usize>, step: usize) -> PyResult<()> {
        let n = self.inner.frequencies().len();
        let set = TokenIndexSet::from_indices(selected, n).map_err(to_py)?;
        self.inner.update(&set, step);
        Ok(())
    }

    #[getter]
    fn frequencies(&self) -> Vec<f64> {
        self.inner.frequencies().to_vec()
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds()
    }

    /// Steps since `token` was last selected, or `None` if it never was.
    fn staleness(&self, token: usize, step: usize) -> PyResult<Option<usize>> {
        if token >= self.inner.frequencies().len() {
            return Err(PyValueError::new_err(format!("token {token} out of range")));
        }
        Ok(self.inner.staleness(token, step))
    }
}

#[pymodule]
fn cat_prune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySampleResult>()?;
    m.add_class::<PyFrequencyTracker>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(token_norms, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(macs, m)?)?;
    m.add_function(wrap_pyfunction!(positional_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}
