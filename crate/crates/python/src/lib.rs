//! Python bindings: data generation, the MLP, spectral tools, the mode
//! criterion and the trainer. Vectors cross the boundary as lists of floats,
//! matrices as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use modngd::datasets::{self, DataConfig};
use modngd::dynamics::{self, Algorithm, TrainConfig};
use modngd::network::{self, Activation, BiasInit, MlpConfig, MlpState};
use modngd::risk;
use modngd::spectral::{self, ModificationMask, SpectralDecomposition};
use modngd::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::AssumptionViolation { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(PyValueError::new_err(format!("unknown activation {name}"))),
    }
}

fn bias_init(name: &str) -> PyResult<BiasInit> {
    match name {
        "zero" => Ok(BiasInit::Zero),
        "uniform" => Ok(BiasInit::Uniform),
        _ => Err(PyValueError::new_err(format!("unknown bias_init {name}"))),
    }
}

/// Scalar-input dataset.
#[pyclass(name = "Dataset", frozen)]
#[derive(Clone)]
struct PyDataset {
    inner: datasets::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<f64>, labels: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: datasets::Dataset::new(inputs, labels).map_err(py_err)? })
    }

    #[getter]
    fn inputs(&self) -> Vec<f64> {
        self.inner.inputs.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.inner.labels.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Train/val/test splits for one `(sigma2, seed)`.
#[pyclass(name = "Splits", frozen)]
struct PySplits {
    inner: datasets::Splits,
}

#[pymethods]
impl PySplits {
    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset { inner: self.inner.train.clone() }
    }

    #[getter]
    fn val(&self) -> PyDataset {
        PyDataset { inner: self.inner.val.clone() }
    }

    #[getter]
    fn test(&self) -> PyDataset {
        PyDataset { inner: self.inner.test.clone() }
    }

    #[getter]
    fn train_raw(&self) -> Vec<f64> {
        self.inner.train_raw.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (sigma2, seed, n_train=256, n_val=64, n_test=64, label_before_perturb=false))]
fn make_splits(
    sigma2: f64,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    label_before_perturb: bool,
) -> PyResult<PySplits> {
    let cfg = DataConfig { n_train, n_val, n_test, sigma2, seed, label_before_perturb };
    Ok(PySplits { inner: datasets::make_splits(&cfg).map_err(py_err)? })
}

#[pyfunction]
fn target(x: f64) -> f64 {
    datasets::target(x)
}

/// Fully connected network with a scalar output.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: MlpState,
}

fn mlp_config(
    hidden_widths: Vec<usize>,
    input_dim: usize,
    activation_name: &str,
    seed: u64,
    bias: &str,
) -> PyResult<MlpConfig> {
    Ok(MlpConfig {
        input_dim,
        hidden_widths,
        activation: activation(activation_name)?,
        seed,
        bias_init: bias_init(bias)?,
    })
}

#[pymethods]
impl PyMlp {
    /// He-initialized network.
    #[new]
    #[pyo3(signature = (hidden_widths, seed=0, input_dim=1, activation="relu", bias_init="uniform"))]
    fn new(hidden_widths: Vec<usize>, seed: u64, input_dim: usize, activation: &str, bias_init: &str) -> PyResult<Self> {
        let cfg = mlp_config(hidden_widths, input_dim, activation, seed, bias_init)?;
        Ok(Self { inner: network::he_init(&cfg).map_err(py_err)? })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().as_slice().to_vec()
    }

    fn set_params(&mut self, theta: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&DVector::from_vec(theta)).map_err(py_err)
    }

    /// Outputs for a flat, row-major batch of inputs.
    fn forward(&self, inputs: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward_batch(&inputs).map_err(py_err)?.as_slice().to_vec())
    }

    /// `N x P` Jacobian as a list of rows.
    fn jacobian(&self, inputs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.jacobian(&inputs).map_err(py_err)?))
    }
}

/// Thin SVD of a Jacobian restricted to its numerical range.
#[pyclass(name = "Spectrum", frozen)]
struct PySpectrum {
    inner: SpectralDecomposition,
}

#[pymethods]
impl PySpectrum {
    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn dropped(&self) -> usize {
        self.inner.dropped()
    }

    /// Singular values, descending.
    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.lambda().as_slice().to_vec()
    }

    /// NTK eigenvalues `lambda_i^2`.
    #[getter]
    fn ntk_eigenvalues(&self) -> Vec<f64> {
        self.inner.lambda_sq().as_slice().to_vec()
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        rows(self.inner.u())
    }

    fn ntk_gram(&self) -> Vec<Vec<f64>> {
        rows(&spectral::ntk_gram(&self.inner))
    }

    /// `U^T r`.
    fn project(&self, residual: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.project(&DVector::from_vec(residual)).map_err(py_err)?.as_slice().to_vec())
    }

    /// Parameter update `N sigma0^2 V diag(mask / lambda) U^T r`.
    fn natural_gradient_step(&self, preserved: Vec<bool>, residual: Vec<f64>, sigma0: f64) -> PyResult<Vec<f64>> {
        let mask = ModificationMask::new(preserved);
        let step = spectral::natural_gradient_step(&self.inner, &mask, &DVector::from_vec(residual), sigma0, self.inner.n_points())
            .map_err(py_err)?;
        Ok(step.as_slice().to_vec())
    }
}

/// Decomposes the network's Jacobian on `inputs`. With `strict=True` a
/// numerically singular NTK is an error instead of being truncated.
#[pyfunction]
#[pyo3(signature = (mlp, inputs, rank_tol=1e-12, strict=false))]
fn decompose(mlp: &PyMlp, inputs: Vec<f64>, rank_tol: f64, strict: bool) -> PyResult<PySpectrum> {
    let j = mlp.inner.jacobian(&inputs).map_err(py_err)?;
    let inner = if strict { spectral::decompose(&j, rank_tol) } else { spectral::decompose_truncated(&j, rank_tol) }
        .map_err(py_err)?;
    Ok(PySpectrum { inner })
}

/// Per-mode criterion values and the resulting preserve flags for `mlp`,
/// with `population` standing in for the evaluation distribution.
#[pyfunction]
fn mode_criterion(
    py: Python<'_>,
    spectrum: &PySpectrum,
    mlp: &PyMlp,
    train: &PyDataset,
    population: &PyDataset,
) -> PyResult<Py<PyDict>> {
    let stats = risk::mode_statistics(&spectrum.inner, &mlp.inner, &train.inner, &population.inner).map_err(py_err)?;
    let mask = risk::criterion_mask(&stats, train.inner.len(), stats.default_alpha_floor()).map_err(py_err)?;
    let report = risk::risk_decomposition(&stats, &mask, train.inner.len()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("criterion", stats.criterion_values())?;
    d.set_item("preserved", mask.as_slice().to_vec())?;
    d.set_item("r1", report.r1)?;
    d.set_item("r2", report.r2)?;
    d.set_item("risk", report.total)?;
    Ok(d.unbind())
}

/// Trains a fresh network on `splits` and returns per-epoch records as dicts.
#[pyfunction]
#[pyo3(signature = (
    splits, algorithm="modified_ngd", hidden_widths=vec![4096], seed=0, epochs=500, eta=0.1,
    lr_halving_period=100, sigma0=None, activation="relu", bias_init="uniform",
    refresh_spectrum=true, linearized=false,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    splits: &PySplits,
    algorithm: &str,
    hidden_widths: Vec<usize>,
    seed: u64,
    epochs: usize,
    eta: f64,
    lr_halving_period: usize,
    sigma0: Option<f64>,
    activation: &str,
    bias_init: &str,
    refresh_spectrum: bool,
    linearized: bool,
) -> PyResult<Vec<Py<PyDict>>> {
    let algorithm = Algorithm::parse(algorithm).ok_or_else(|| PyValueError::new_err(format!("unknown algorithm {algorithm}")))?;
    let net = mlp_config(hidden_widths, 1, activation, seed, bias_init)?;
    let cfg = TrainConfig {
        eta,
        epochs,
        lr_halving_period,
        sigma0,
        algorithm,
        refresh_spectrum,
        linearized,
        ..TrainConfig::default()
    };
    let splits = &splits.inner;
    let traj = py.detach(|| dynamics::train(splits, &net, &cfg)).map_err(py_err)?;
    traj.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("lr", r.lr)?;
            d.set_item("train_mse", r.train_mse)?;
            d.set_item("val_mse", r.val_mse)?;
            d.set_item("test_mse", r.test_mse)?;
            d.set_item("n_preserved", r.n_preserved)?;
            d.set_item("n_modes", r.n_modes)?;
            Ok(d.unbind())
        })
        .collect()
}

#[pymodule]
pub fn modngd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplits>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PySpectrum>()?;
    m.add_function(wrap_pyfunction!(make_splits, m)?)?;
    m.add_function(wrap_pyfunction!(target, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(mode_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
