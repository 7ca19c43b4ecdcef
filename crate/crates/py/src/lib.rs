//! Python bindings. Point clouds cross the boundary as lists of rows and
//! reports come back as plain dicts.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use scorelab::diffusion::{ei_backward_sample, Convention, NoiseSchedule, DEFAULT_COSINE_OFFSET, DEFAULT_RATIO_CAP};
use scorelab::gmm::{sample_gmm, sample_gmm_truncated, true_diffused_score, Dataset, GmmSpec, MixtureScore};
use scorelab::losses::{decompose, discretized_gap_report, gap_bound_report, McConfig};
use scorelab::model::{load_checkpoint, save_checkpoint, MlpArch, NetScore, ScoreNet};
use scorelab::optim::{proxy_b, proxy_b_sqrt_n, train, OptimizerConfig};
use scorelab::ot::{correlations, w2_exact, SampleCloud};
use scorelab::rng::Streams;
use scorelab::score::ScoreField;
use scorelab::topology::{mst_lifetime_sum, positive_magnitude, topology_bound_rhs, BoundParams, BoundVariant, DistanceMatrix};
use scorelab::Error;

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for scorelab::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(|e| match e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Schema(_) | Error::Size(_) | Error::ScheduleConstruction(_) => {
                PyValueError::new_err(e.to_string())
            }
            Error::Io { .. } => PyIOError::new_err(e.to_string()),
            _ => PyRuntimeError::new_err(e.to_string()),
        })
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let m = rows.len();
    Array2::from_shape_vec((m, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn distance_matrix(rows: Vec<Vec<f64>>) -> PyResult<DistanceMatrix> {
    let k = rows.len();
    let a = to_array(rows)?;
    if a.ncols() != k {
        return Err(PyValueError::new_err("distance matrix must be square"));
    }
    DistanceMatrix::from_dense(k, a.into_raw_vec_and_offset().0).or_raise()
}

fn convention(name: &str) -> PyResult<Convention> {
    match name {
        "lebesgue" => Ok(Convention::Lebesgue),
        "gamma" => Ok(Convention::Gamma),
        other => Err(PyValueError::new_err(format!("unknown convention {other:?}"))),
    }
}

/// Isotropic Gaussian mixture.
#[pyclass(name = "GmmSpec", frozen)]
struct PyGmmSpec {
    inner: GmmSpec,
}

#[pymethods]
impl PyGmmSpec {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigma2: f64) -> PyResult<Self> {
        Ok(Self { inner: GmmSpec::new(weights, means, sigma2).or_raise()? })
    }

    /// The default nine-component mixture in four dimensions.
    #[staticmethod]
    fn nine_component(seed: u64) -> Self {
        Self { inner: GmmSpec::nine_component(seed) }
    }

    #[staticmethod]
    fn gaussian(mean: Vec<f64>, sigma2: f64) -> PyResult<Self> {
        Ok(Self { inner: GmmSpec::gaussian(mean, sigma2).or_raise()? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: GmmSpec::from_json(text).or_raise()? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().or_raise()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn support_radius(&self) -> f64 {
        self.inner.support_radius()
    }

    #[pyo3(signature = (n, seed, truncated = false))]
    fn sample(&self, n: usize, seed: u64, truncated: bool) -> PyResult<PyDataset> {
        let streams = Streams::new(seed);
        let inner = if truncated {
            sample_gmm_truncated(&self.inner, n, &streams)
        } else {
            sample_gmm(&self.inner, n, &streams)
        };
        Ok(PyDataset { inner: inner.or_raise()? })
    }

    /// Score of the mixture diffused to time `t`, at each row of `points`.
    #[pyo3(signature = (t, points, convention = "lebesgue"))]
    fn score(&self, t: f64, points: Vec<Vec<f64>>, convention: &str) -> PyResult<Vec<Vec<f64>>> {
        let conv = self::convention(convention)?;
        points.iter().map(|x| true_diffused_score(&self.inner, t, x, conv).or_raise()).collect()
    }

    fn __repr__(&self) -> String {
        format!("GmmSpec(d={}, components={}, sigma2={})", self.inner.d, self.inner.weights.len(), self.inner.sigma2)
    }
}

/// A finite sample, one point per row.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(points: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: Dataset::external(to_array(points)?, "python").or_raise()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load(&path).or_raise()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).or_raise()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.points())
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

/// Discrete time grid of the forward process.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[staticmethod]
    fn uniform(horizon: f64, n: usize) -> PyResult<Self> {
        Ok(Self { inner: NoiseSchedule::uniform(horizon, n).or_raise()? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, s = DEFAULT_COSINE_OFFSET, ratio_cap = DEFAULT_RATIO_CAP))]
    fn cosine(n: usize, s: f64, ratio_cap: f64) -> PyResult<Self> {
        Ok(Self { inner: NoiseSchedule::cosine(n, s, ratio_cap).or_raise()? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: NoiseSchedule::from_json(text).or_raise()? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().or_raise()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    fn steps(&self) -> Vec<f64> {
        self.inner.steps().to_vec()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn min_step(&self) -> f64 {
        self.inner.min_step()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Time-conditioned residual MLP predicting the forward noise.
#[pyclass(name = "ScoreNet")]
struct PyScoreNet {
    inner: ScoreNet,
}

#[pymethods]
impl PyScoreNet {
    #[new]
    #[pyo3(signature = (d, horizon, seed = 0))]
    fn new(d: usize, horizon: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: ScoreNet::init(MlpArch::new(d, horizon), seed).or_raise()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).or_raise()?.0 })
    }

    #[pyo3(signature = (path, seed = 0, step = 0))]
    fn save(&self, path: PathBuf, seed: u64, step: u64) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, seed, step).or_raise()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params().len()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().as_slice().to_vec()
    }

    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&values).or_raise()
    }

    /// Model drift `2 grad log p~` at time `t` for each row of `points`.
    fn score(&self, t: f64, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let xs = to_array(points)?;
        Ok(to_rows(&NetScore::gamma(&self.inner).eval(t, xs.view()).or_raise()?))
    }

    /// Train in place. `optimizer` is the JSON optimizer config used by the
    /// command-line front end. Returns the per-step statistics.
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: &PyDataset,
        schedule: &PyNoiseSchedule,
        optimizer: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let config: OptimizerConfig = serde_json::from_str(optimizer).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let outcome = py
            .detach(|| train(self.inner.clone(), &data.inner, &schedule.inner, &config, &Streams::new(seed), &mut ()))
            .or_raise()?;
        self.inner = outcome.net;
        to_dict(py, &outcome.stats)
    }
}

/// Exponential-integrator backward sampling from `net`, or from the exact
/// diffused mixture when `spec` is given instead.
#[pyfunction]
#[pyo3(signature = (schedule, m, seed, net = None, spec = None))]
fn sample_backward(
    schedule: &PyNoiseSchedule,
    m: usize,
    seed: u64,
    net: Option<PyRef<'_, PyScoreNet>>,
    spec: Option<&PyGmmSpec>,
) -> PyResult<Vec<Vec<f64>>> {
    let streams = Streams::new(seed);
    let out = match (net, spec) {
        (Some(net), None) => ei_backward_sample(&NetScore::gamma(&net.inner), &schedule.inner, m, &streams),
        (None, Some(spec)) => ei_backward_sample(&MixtureScore::model_target(&spec.inner), &schedule.inner, m, &streams),
        _ => return Err(PyValueError::new_err("pass exactly one of net or spec")),
    };
    Ok(to_rows(&out.or_raise()?))
}

/// All terms of the score-error decomposition under the lambda weights of
/// `schedule`. Without `net` the exact mixture score is evaluated.
#[pyfunction]
#[pyo3(signature = (data, spec, schedule, m, seed, net = None, common_random_numbers = true))]
#[allow(clippy::too_many_arguments)]
fn decomposition<'py>(
    py: Python<'py>,
    data: &PyDataset,
    spec: &PyGmmSpec,
    schedule: &PyNoiseSchedule,
    m: usize,
    seed: u64,
    net: Option<PyRef<'_, PyScoreNet>>,
    common_random_numbers: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mc = McConfig { common_random_numbers, ..McConfig::new(m, seed) };
    let measure = schedule.inner.lambda_measure();
    let report = match net {
        Some(net) => decompose(&NetScore::gamma(&net.inner), &data.inner, &spec.inner, &measure, &mc),
        None => decompose(&MixtureScore::model_target(&spec.inner), &data.inner, &spec.inner, &measure, &mc),
    };
    to_dict(py, &report.or_raise()?)
}

/// Empirical-gap and discretized-gap bound reports.
#[pyfunction]
#[pyo3(signature = (data, spec, schedule, delta = 0.05, m = 256, seed = 0, w_samples = 1024))]
#[allow(clippy::too_many_arguments)]
fn gap_bounds<'py>(
    py: Python<'py>,
    data: &PyDataset,
    spec: &PyGmmSpec,
    schedule: &PyNoiseSchedule,
    delta: f64,
    m: usize,
    seed: u64,
    w_samples: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mc = McConfig::new(m, seed);
    let gap = gap_bound_report(&data.inner, &spec.inner, &schedule.inner.lambda_measure(), delta, &mc).or_raise()?;
    let discretized = discretized_gap_report(&data.inner, &spec.inner, &schedule.inner, delta, &mc, w_samples).or_raise()?;
    to_dict(py, &serde_json::json!({"gap": gap, "discretized_gap": discretized}))
}

/// Exact 2-Wasserstein distance between two equal-size point clouds.
#[pyfunction]
fn w2<'py>(py: Python<'py>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let x = SampleCloud::new(to_array(x)?).or_raise()?;
    let y = SampleCloud::new(to_array(y)?).or_raise()?;
    to_dict(py, &py.detach(|| w2_exact(&x, &y)).or_raise()?)
}

#[pyfunction(name = "correlations")]
fn py_correlations<'py>(py: Python<'py>, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &correlations(&xs, &ys).or_raise()?)
}

/// Sum of minimum-spanning-tree edge lengths of a dense distance matrix.
#[pyfunction]
fn mst_lifetime(dist: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(mst_lifetime_sum(&distance_matrix(dist)?))
}

/// Positive magnitude of the scaled space `r * dist`.
#[pyfunction]
fn magnitude<'py>(py: Python<'py>, dist: Vec<Vec<f64>>, r: f64) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &positive_magnitude(&distance_matrix(dist)?, r).or_raise()?)
}

/// Trajectory bound with unit hidden constants. `variant` is `"lifetime"`
/// (complexity = MST lifetime sum) or `"magnitude"` (complexity = PMag).
#[pyfunction]
#[pyo3(signature = (complexity, n, variant, loss_bound = 1.0, delta = 0.05, r = 1.0, mutual_information = 0.0))]
fn topology_bound(
    complexity: f64,
    n: usize,
    variant: &str,
    loss_bound: f64,
    delta: f64,
    r: f64,
    mutual_information: f64,
) -> PyResult<f64> {
    let variant = match variant {
        "lifetime" => BoundVariant::Lifetime,
        "magnitude" => BoundVariant::Magnitude,
        other => return Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    };
    let params = BoundParams { mutual_information, ..BoundParams::new(loss_bound, delta, r) };
    topology_bound_rhs(complexity, &params, n, variant).or_raise()
}

/// Gradient-norm proxy; `sqrt_n` selects the `sqrt(n)` normalization.
#[pyfunction]
#[pyo3(signature = (n, eta, beta, avg_sq_grad, sqrt_n = false))]
fn b_proxy(n: usize, eta: f64, beta: f64, avg_sq_grad: f64, sqrt_n: bool) -> f64 {
    if sqrt_n {
        proxy_b_sqrt_n(n, eta, beta, avg_sq_grad)
    } else {
        proxy_b(n, eta, beta, avg_sq_grad)
    }
}

#[pymodule]
fn scorelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", scorelab::runner::VERSION)?;
    m.add_class::<PyGmmSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyScoreNet>()?;
    m.add_function(wrap_pyfunction!(sample_backward, m)?)?;
    m.add_function(wrap_pyfunction!(decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(gap_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(w2, m)?)?;
    m.add_function(wrap_pyfunction!(py_correlations, m)?)?;
    m.add_function(wrap_pyfunction!(mst_lifetime, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(topology_bound, m)?)?;
    m.add_function(wrap_pyfunction!(b_proxy, m)?)?;
    Ok(())
}
