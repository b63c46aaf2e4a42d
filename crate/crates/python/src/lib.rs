//! Python bindings: architecture parsing, weight stores, classification,
//! gradient checks, augmentation and the benchmark harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use lusnet::arch::{self, NetworkSpec};
use lusnet::classifier::{ClassProbabilities, Classifier};
use lusnet::imaging::{self, ImageU8};
use lusnet::network::{self, LayerOp, Prediction};
use lusnet::{bench, training, weights, KernelMode, Tensor, WeightStore, WeightsError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn weights_err(e: WeightsError) -> PyErr {
    match e {
        WeightsError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn parse_mode(mode: &str) -> PyResult<KernelMode> {
    mode.parse().map_err(value_err)
}

#[pyclass(name = "Spec", module = "pylusnet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: NetworkSpec,
}

#[pymethods]
impl PySpec {
    #[new]
    #[pyo3(signature = (text = arch::DEFAULT_ARCH))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: arch::parse_arch(text).map_err(value_err)?,
        })
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    #[getter]
    fn input_dims(&self) -> Vec<usize> {
        self.inner.input_dims.clone()
    }

    #[getter]
    fn class_labels(&self) -> Vec<String> {
        self.inner.class_labels.clone()
    }

    fn with_input_dims(&self, dims: Vec<usize>) -> Self {
        Self {
            inner: self.inner.clone().with_input_dims(dims),
        }
    }

    /// Output shape of every stage; raises ValueError on a shape conflict.
    fn infer_shapes(&self) -> PyResult<Vec<Vec<usize>>> {
        network::infer_shapes(&self.inner).map_err(value_err)
    }

    /// `(name, kind, output_dims)` per expanded layer.
    fn layers(&self) -> PyResult<Vec<(String, String, Vec<usize>)>> {
        Ok(network::plan(&self.inner)
            .map_err(value_err)?
            .into_iter()
            .map(|l| {
                let kind = match l.op {
                    LayerOp::Conv { .. } => "conv",
                    LayerOp::MaxPool(_) => "maxpool",
                    LayerOp::Flatten => "flatten",
                    LayerOp::Dense { .. } => "dense",
                };
                (l.name, kind.to_string(), l.output_dims)
            })
            .collect())
    }

    fn param_count(&self) -> PyResult<usize> {
        network::param_count(&self.inner).map_err(value_err)
    }

    fn total_macs(&self) -> PyResult<u64> {
        bench::total_macs(&self.inner).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.layers.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Spec({:?})", self.inner.render())
    }
}

#[pyclass(name = "Weights", module = "pylusnet", skip_from_py_object)]
#[derive(Clone)]
struct PyWeights {
    inner: WeightStore,
}

#[pymethods]
impl PyWeights {
    #[new]
    fn new() -> Self {
        Self {
            inner: WeightStore::new(),
        }
    }

    /// He-normal initialization keyed by `seed`.
    #[staticmethod]
    #[pyo3(signature = (spec, seed = 0))]
    fn init(spec: &PySpec, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: network::init_params(&spec.inner, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn zeros(spec: &PySpec) -> PyResult<Self> {
        Ok(Self {
            inner: network::zero_params(&spec.inner).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: weights::load(path).map_err(weights_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: WeightStore::from_bytes(data).map_err(weights_err)?,
        })
    }

    /// Writes a LUSW file and returns its size in bytes.
    fn save(&self, path: PathBuf) -> PyResult<usize> {
        weights::save(&self.inner, path).map_err(weights_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    /// `(dims, values)` of one tensor.
    fn get(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no tensor {name:?}")))?;
        Ok((t.dims().to_vec(), t.data().to_vec()))
    }

    fn insert(&mut self, name: String, dims: Vec<usize>, values: Vec<f32>) -> PyResult<()> {
        let t = Tensor::new(dims, values).map_err(value_err)?;
        self.inner.insert(name, t).map_err(weights_err)
    }

    fn scalar_count(&self) -> usize {
        self.inner.scalar_count()
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.contains(name)
    }

    fn __repr__(&self) -> String {
        format!("Weights({} tensors, {} scalars)", self.inner.len(), self.inner.scalar_count())
    }
}

fn prediction_dict<'py>(py: Python<'py>, p: &Prediction) -> PyResult<Bound<'py, PyDict>> {
    let probs = ClassProbabilities::from_prediction(p);
    let d = PyDict::new(py);
    d.set_item("label", &p.label)?;
    let pd = PyDict::new(py);
    pd.set_item("covid", probs.covid)?;
    pd.set_item("healthy", probs.healthy)?;
    d.set_item("probabilities", pd)?;
    d.set_item("latency_ms", p.latency.as_secs_f64() * 1e3)?;
    Ok(d)
}

#[pyclass(name = "Classifier", module = "pylusnet", frozen)]
struct PyClassifier {
    inner: Classifier,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (spec, weights, mode = "fast"))]
    fn new(spec: &PySpec, weights: &PyWeights, mode: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Classifier::new(spec.inner.clone(), weights.inner.clone(), parse_mode(mode)?).map_err(value_err)?,
        })
    }

    /// Classifies a binary PGM payload; returns `{label, probabilities, latency_ms}`.
    fn classify_pgm<'py>(&self, py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
        let p = py.detach(|| self.inner.classify_pgm(data)).map_err(value_err)?;
        prediction_dict(py, &p)
    }

    fn classify_file<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let data = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.classify_pgm(py, &data)
    }

    /// Classifies raw 8-bit grayscale pixels in row-major order.
    fn classify_pixels<'py>(&self, py: Python<'py>, width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
        let img = ImageU8::new(width, height, pixels).map_err(value_err)?;
        let p = py.detach(|| self.inner.classify_image(&img)).map_err(value_err)?;
        prediction_dict(py, &p)
    }
}

#[pyfunction]
fn parse_arch(text: &str) -> PyResult<PySpec> {
    PySpec::new(text)
}

/// Max relative error between analytic and central-difference gradients.
#[pyfunction]
#[pyo3(signature = (spec, weights, image, label, epsilon = 1e-4))]
fn grad_check(spec: &PySpec, weights: &PyWeights, image: Vec<f32>, label: usize, epsilon: f64) -> PyResult<f64> {
    let t = Tensor::new(spec.inner.input_dims.clone(), image).map_err(value_err)?;
    training::grad_check(&spec.inner, &weights.inner, &t, label, epsilon).map_err(value_err)
}

/// Benchmark report as a JSON string.
#[pyfunction]
#[pyo3(signature = (spec, weights, iterations = 1, mode = "fast"))]
fn bench_forward(py: Python<'_>, spec: &PySpec, weights: &PyWeights, iterations: usize, mode: &str) -> PyResult<String> {
    if iterations == 0 {
        return Err(PyValueError::new_err("iterations must be at least 1"));
    }
    let mode = parse_mode(mode)?;
    let report = py
        .detach(|| bench::bench_forward(&spec.inner, &weights.inner, iterations, mode))
        .map_err(value_err)?;
    serde_json::to_string(&report).map_err(value_err)
}

#[pyfunction]
fn encode_pgm<'py>(py: Python<'py>, width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Bound<'py, PyBytes>> {
    let img = ImageU8::new(width, height, pixels).map_err(value_err)?;
    Ok(PyBytes::new(py, &imaging::encode_pgm(&img)))
}

/// `(width, height, pixels)` of a binary PGM payload.
#[pyfunction]
fn decode_pgm<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let img = imaging::decode_pgm(data).map_err(value_err)?;
    Ok((img.width(), img.height(), PyBytes::new(py, img.pixels())))
}

/// The original plus nine seeded variants, each as 8-bit pixels.
#[pyfunction]
fn expand_10x<'py>(py: Python<'py>, width: usize, height: usize, pixels: Vec<u8>, seed: u64) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let img = imaging::normalize(&ImageU8::new(width, height, pixels).map_err(value_err)?);
    Ok(imaging::expand_10x(&img, seed)
        .iter()
        .map(|v| PyBytes::new(py, imaging::quantize(v).pixels()))
        .collect())
}

#[pymodule]
fn pylusnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_ARCH", arch::DEFAULT_ARCH)?;
    m.add("EXPANSION_FACTOR", imaging::EXPANSION_FACTOR)?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(parse_arch, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(bench_forward, m)?)?;
    m.add_function(wrap_pyfunction!(encode_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(decode_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(expand_10x, m)?)?;
    Ok(())
}
