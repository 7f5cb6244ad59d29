use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use scnn_core::canonical;
use scnn_core::detect::{default_anchors, DetectConfig};
use scnn_core::ica::{self, IcaConfig};
use scnn_core::io;
use scnn_core::layers::{self as core_layers, OpMode};
use scnn_core::synth::{self, SceneSpec};
use scnn_core::{train, ScnnError, Shape};

fn py_err(e: ScnnError) -> PyErr {
    match e {
        ScnnError::Io(e) => PyIOError::new_err(e.to_string()),
        ScnnError::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn shape_of(s: (usize, usize, usize)) -> Shape {
    Shape::new(s.0, s.1, s.2)
}

/// `(frame, cx, cy, w, h)`.
type TrackRow = (usize, f64, f64, f64, f64);
/// `(cx, cy, w, h, confidence)`.
type ScoredBox = (f64, f64, f64, f64, f64);

fn tuple_of(s: Shape) -> (usize, usize, usize) {
    (s.c, s.h, s.w)
}

/// `mean + sum_k sens[k] * X_k + noise * R`.
#[pyclass(name = "CanonicalForm", module = "scnn", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCanonicalForm(canonical::CanonicalForm);

#[pymethods]
impl PyCanonicalForm {
    #[new]
    #[pyo3(signature = (mean, sens, noise=0.0))]
    fn new(mean: f64, sens: Vec<f64>, noise: f64) -> PyResult<Self> {
        canonical::CanonicalForm::new(mean, sens, noise).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn deterministic(value: f64, m: usize) -> Self {
        Self(canonical::CanonicalForm::deterministic(value, m))
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.0.mean()
    }

    #[getter]
    fn sens(&self) -> Vec<f64> {
        self.0.sens().to_vec()
    }

    #[getter]
    fn noise(&self) -> f64 {
        self.0.noise()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn variance(&self) -> f64 {
        self.0.variance()
    }

    fn std(&self) -> f64 {
        self.0.variance().sqrt()
    }

    fn covariance(&self, other: &PyCanonicalForm) -> PyResult<f64> {
        self.0.covariance(&other.0).map_err(py_err)
    }

    /// Value at a basis realization, with the private term at zero.
    fn evaluate(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.evaluate(&x).map_err(py_err)
    }

    fn scale(&self, w: f64) -> Self {
        Self(self.0.scale(w))
    }

    fn __add__(&self, other: &PyCanonicalForm) -> PyResult<Self> {
        canonical::weighted_sum(&[self.0.clone(), other.0.clone()], &[1.0, 1.0])
            .map(Self)
            .map_err(py_err)
    }

    fn __sub__(&self, other: &PyCanonicalForm) -> PyResult<Self> {
        canonical::weighted_sum(&[self.0.clone(), other.0.clone()], &[1.0, -1.0])
            .map(Self)
            .map_err(py_err)
    }

    fn __mul__(&self, w: f64) -> Self {
        self.scale(w)
    }

    fn __rmul__(&self, w: f64) -> Self {
        self.scale(w)
    }

    fn __eq__(&self, other: &PyCanonicalForm) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "CanonicalForm(mean={}, sens={:?}, noise={})",
            self.0.mean(),
            self.0.sens(),
            self.0.noise()
        )
    }
}

fn forms(ds: &[PyRef<'_, PyCanonicalForm>]) -> Vec<canonical::CanonicalForm> {
    ds.iter().map(|d| d.0.clone()).collect()
}

#[pyfunction]
fn weighted_sum(ds: Vec<PyRef<'_, PyCanonicalForm>>, ws: Vec<f64>) -> PyResult<PyCanonicalForm> {
    canonical::weighted_sum(&forms(&ds), &ws).map(PyCanonicalForm).map_err(py_err)
}

/// Clark max of two forms; returns the form and the tightness `P(a > b)`.
#[pyfunction]
fn max2(a: &PyCanonicalForm, b: &PyCanonicalForm) -> PyResult<(PyCanonicalForm, f64)> {
    canonical::max2(&a.0, &b.0)
        .map(|(c, t)| (PyCanonicalForm(c), t))
        .map_err(py_err)
}

#[pyfunction]
fn max_n(ds: Vec<PyRef<'_, PyCanonicalForm>>) -> PyResult<(PyCanonicalForm, Vec<f64>)> {
    canonical::max_n(&forms(&ds))
        .map(|(c, t)| (PyCanonicalForm(c), t))
        .map_err(py_err)
}

#[pyfunction]
fn tightness(a: &PyCanonicalForm, b: &PyCanonicalForm) -> PyResult<f64> {
    canonical::tightness(&a.0, &b.0).map_err(py_err)
}

/// A tensor of canonical forms, stored plane by plane.
#[pyclass(name = "CanonicalTensor", module = "scnn", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCanonicalTensor(scnn_core::CanonicalTensor);

#[pymethods]
impl PyCanonicalTensor {
    /// `data` holds `m + 2` planes: mean, `m` sensitivities, noise.
    #[new]
    fn new(shape: (usize, usize, usize), m: usize, data: Vec<f64>) -> PyResult<Self> {
        scnn_core::CanonicalTensor::from_raw(shape_of(shape), m, data)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_forms(shape: (usize, usize, usize), forms_: Vec<PyRef<'_, PyCanonicalForm>>) -> PyResult<Self> {
        scnn_core::CanonicalTensor::from_forms(shape_of(shape), &forms(&forms_))
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        tuple_of(self.0.shape())
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn mean_plane(&self) -> Vec<f64> {
        self.0.mean_plane().to_vec()
    }

    fn noise_plane(&self) -> Vec<f64> {
        self.0.noise_plane().to_vec()
    }

    fn form(&self, site: usize) -> PyResult<PyCanonicalForm> {
        if site >= self.0.len() {
            return Err(PyIndexError::new_err(format!("site {site} out of range for {} sites", self.0.len())));
        }
        Ok(PyCanonicalForm(self.0.form(site)))
    }

    fn evaluate(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.evaluate(&x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("CanonicalTensor(shape={}, m={})", self.0.shape(), self.0.m())
    }
}

/// `n` frames of a `c × h × w` image sequence.
#[pyclass(name = "Snippet", module = "scnn", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySnippet(ica::Snippet);

#[pymethods]
impl PySnippet {
    #[new]
    fn new(n: usize, shape: (usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        ica::Snippet::new(n, shape_of(shape), data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_snippet(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_snippet(&path, &self.0).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        tuple_of(self.0.shape())
    }

    fn frame(&self, t: usize) -> PyResult<Vec<f32>> {
        self.0.frame(t).map(<[f32]>::to_vec).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Snippet(n={}, shape={})", self.0.n(), self.0.shape())
    }
}

#[pyclass(name = "SnippetModel", module = "scnn", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySnippetModel(ica::SnippetModel);

#[pymethods]
impl PySnippetModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_model(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_model(&path, &self.0).map_err(py_err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn canonical(&self) -> PyCanonicalTensor {
        PyCanonicalTensor(self.0.canonical.clone())
    }

    /// Per-frame mean absolute reconstruction error, in percent.
    #[getter]
    fn recon_error(&self) -> Vec<f64> {
        self.0.recon_error.clone()
    }

    fn mean_error(&self) -> f64 {
        self.0.mean_error()
    }

    /// Basis values `X_1..X_m` at frame `t`.
    fn realization(&self, t: usize) -> PyResult<Vec<f64>> {
        self.0.realization(t).map_err(py_err)
    }

    fn reconstruct(&self, t: usize) -> PyResult<Vec<f64>> {
        ica::reconstruct(&self.0, t).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("SnippetModel(m={}, n={}, mean_error={:.3})", self.0.m(), self.0.n(), self.0.mean_error())
    }
}

#[pyfunction]
#[pyo3(signature = (snippet, m, seed=0, max_iter=200, tol=1e-4))]
fn extract(snippet: &PySnippet, m: usize, seed: u64, max_iter: usize, tol: f64) -> PyResult<PySnippetModel> {
    let cfg = IcaConfig { max_iter, tol, seed };
    ica::extract(&snippet.0, m, &cfg).map(PySnippetModel).map_err(py_err)
}

/// Synthetic moving-object snippet and its `(frame, cx, cy, w, h)` track.
#[pyfunction]
#[pyo3(signature = (seed, n=16, size=32, channels=3, noise=0.02))]
fn generate(
    seed: u64,
    n: usize,
    size: usize,
    channels: usize,
    noise: f64,
) -> PyResult<(PySnippet, Vec<TrackRow>)> {
    let spec = SceneSpec { n, size, channels, noise, ..SceneSpec::default() };
    let (snip, track) = synth::generate(&spec, seed).map_err(py_err)?;
    let rows = track
        .iter()
        .map(|r| (r.frame, r.bbox.cx, r.bbox.cy, r.bbox.w, r.bbox.h))
        .collect();
    Ok((PySnippet(snip), rows))
}

#[pyclass(name = "Network", module = "scnn", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNetwork(core_layers::Network);

#[pymethods]
impl PyNetwork {
    /// Builds from the text description format.
    #[staticmethod]
    #[pyo3(signature = (description, seed=0))]
    fn from_description(description: &str, seed: u64) -> PyResult<Self> {
        let (input, specs) = io::parse_network(description).map_err(py_err)?;
        core_layers::Network::init(input, &specs, seed).map(Self).map_err(py_err)
    }

    /// The built-in detector on `channels × size × size` input.
    #[staticmethod]
    #[pyo3(signature = (channels=3, size=32, seed=0))]
    fn micro(channels: usize, size: usize, seed: u64) -> PyResult<Self> {
        core_layers::Network::init(Shape::new(channels, size, size), &train::micro_net_specs(), seed)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_checkpoint(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_checkpoint(&path, &self.0).map_err(py_err)
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        tuple_of(self.0.input_shape())
    }

    #[getter]
    fn output_shape(&self) -> (usize, usize, usize) {
        tuple_of(self.0.output_shape())
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn infer(&self, py: Python<'_>, x: &PyCanonicalTensor) -> PyResult<PyCanonicalTensor> {
        let net = &self.0;
        let x = &x.0;
        py.detach(|| net.infer(x)).map(PyCanonicalTensor).map_err(py_err)
    }

    /// Deterministic forward pass over `count` stacked frames.
    fn forward_frames(&self, frames: Vec<f64>, count: usize) -> PyResult<Vec<f64>> {
        self.0.forward_frames(&frames, count).map_err(py_err)
    }

    /// Per-frame `(cx, cy, w, h, confidence)`.
    fn predict(&self, py: Python<'_>, model: &PySnippetModel) -> PyResult<Vec<ScoredBox>> {
        let (net, model) = (&self.0, &model.0);
        let preds = py
            .detach(|| train::predict(net, model, &default_anchors(), &DetectConfig::default()))
            .map_err(py_err)?;
        Ok(preds
            .iter()
            .map(|p| (p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h, p.confidence))
            .collect())
    }

    /// Operation counts `(scnn, per_frame)` for an `n`-frame snippet with basis size `m`.
    fn count_ops(&self, n: usize, m: usize) -> (u64, u64) {
        (
            core_layers::count_ops(&self.0, OpMode::Scnn, n, m).total,
            core_layers::count_ops(&self.0, OpMode::PerFrame, n, m).total,
        )
    }

    fn speedup_ratio(&self, n: usize, m: usize) -> f64 {
        core_layers::speedup_ratio(&self.0, n, m)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input={}, output={}, params={})",
            self.0.input_shape(),
            self.0.output_shape(),
            self.0.param_count()
        )
    }
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    use scnn_core::detect::BoxCoords;
    scnn_core::detect::iou(&BoxCoords::new(a.0, a.1, a.2, a.3), &BoxCoords::new(b.0, b.1, b.2, b.3))
}

#[pymodule]
fn scnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCanonicalForm>()?;
    m.add_class::<PyCanonicalTensor>()?;
    m.add_class::<PySnippet>()?;
    m.add_class::<PySnippetModel>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(weighted_sum, m)?)?;
    m.add_function(wrap_pyfunction!(max2, m)?)?;
    m.add_function(wrap_pyfunction!(max_n, m)?)?;
    m.add_function(wrap_pyfunction!(tightness, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    Ok(())
}
