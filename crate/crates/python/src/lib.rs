//! Python bindings: tensors, networks and their Taylorizations, trajectory
//! metrics, the two-layer theory tools, and config-driven experiments.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use taylorlab::exp::ExperimentConfig;
use taylorlab::theory::{self, GradientFlowConfig, TwoLayerNet};
use taylorlab::{metrics, nn, ActivationKind, Architecture, InitScheme, ModelKind};

fn err(e: taylorlab::Error) -> PyErr {
    match e {
        taylorlab::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn activation(name: &str) -> PyResult<ActivationKind> {
    name.parse().map_err(err)
}

fn model_kind(order: Option<usize>) -> ModelKind {
    order.map_or(ModelKind::Full, ModelKind::Taylor)
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "taylorlab_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: taylorlab::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: taylorlab::Tensor::new(shape, data).map_err(err)? })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: taylorlab::Tensor::from_rows(&rows).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn rows(&self) -> PyResult<Vec<Vec<f64>>> {
        let (n, _) = self.inner.dims2().map_err(err)?;
        Ok((0..n).map(|i| self.inner.row(i).to_vec()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Network shape.
#[pyclass(name = "Architecture", module = "taylorlab_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyArchitecture {
    inner: Architecture,
}

#[pymethods]
impl PyArchitecture {
    #[staticmethod]
    #[pyo3(signature = (dims, activation = "tanh", bias = true))]
    fn mlp(dims: Vec<usize>, activation: &str, bias: bool) -> PyResult<Self> {
        let inner = Architecture::mlp(&dims, self::activation(activation)?).with_bias(bias);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.input_len()
    }

    #[getter]
    fn output_len(&self) -> usize {
        self.inner.output_len()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Parameters `θ` with their anchor `θ0`.
#[pyclass(name = "ParamSet", module = "taylorlab_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyParamSet {
    inner: nn::ParamSet,
}

#[pymethods]
impl PyParamSet {
    #[staticmethod]
    #[pyo3(signature = (arch, seed, scheme = "standard"))]
    fn init(arch: &PyArchitecture, seed: u64, scheme: &str) -> PyResult<Self> {
        let scheme: InitScheme = scheme.parse().map_err(err)?;
        Ok(Self { inner: nn::init_params(&arch.inner, scheme, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: nn::serialize::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::serialize::save(&self.inner, &path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &nn::serialize::to_bytes(&self.inner))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn names(&self) -> Vec<String> {
        self.inner.entries().iter().map(|e| e.name.clone()).collect()
    }

    fn theta(&self) -> Vec<f64> {
        self.inner.theta_flat()
    }

    fn anchor(&self) -> Vec<f64> {
        self.inner.anchor_flat()
    }

    fn set_theta(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.inner.set_theta_flat(&flat).map_err(err)
    }
}

/// Full network output, or the order-`order` Taylorization when given.
#[pyfunction]
#[pyo3(signature = (arch, params, x, order = None))]
fn forward(arch: &PyArchitecture, params: &PyParamSet, x: &PyTensor, order: Option<usize>) -> PyResult<PyTensor> {
    let out = nn::forward_model(&arch.inner, &params.inner, &x.inner, model_kind(order)).map_err(err)?;
    Ok(PyTensor { inner: out })
}

#[pyfunction]
fn cos_param(theta_k: Vec<f64>, theta: Vec<f64>, theta0: Vec<f64>) -> PyResult<Option<f64>> {
    metrics::cos_param(&theta_k, &theta, &theta0).map_err(err)
}

#[pyfunction]
fn cos_func(fk: &PyTensor, f: &PyTensor, f0: &PyTensor) -> PyResult<Option<f64>> {
    metrics::cos_func(&fk.inner, &f.inner, &f0.inner).map_err(err)
}

#[pyfunction]
fn demean_logits(logits: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: metrics::demean_logits(&logits.inner).map_err(err)? })
}

/// Returns `(coords, explained)` of the joint 2-D PCA of the rows.
#[pyfunction]
fn pca_embed(rows: Vec<Vec<f64>>) -> PyResult<(Vec<[f64; 2]>, [f64; 2])> {
    let e = metrics::pca_embed(&rows).map_err(err)?;
    Ok((e.coords, e.explained))
}

/// Two-layer net `m^{-1/2} Σ a_r σ(w_rᵀx)` with fixed output weights.
#[pyclass(name = "TwoLayerNet", module = "taylorlab_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTwoLayerNet {
    inner: TwoLayerNet,
}

#[pymethods]
impl PyTwoLayerNet {
    #[new]
    #[pyo3(signature = (width, input_dim, seed, activation = "tanh"))]
    fn new(width: usize, input_dim: usize, seed: u64, activation: &str) -> PyResult<Self> {
        let inner = TwoLayerNet::init(width, input_dim, self::activation(activation)?, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn w0(&self) -> Vec<f64> {
        self.inner.w0().to_vec()
    }

    #[pyo3(signature = (w, x, order = None))]
    fn output(&self, w: Vec<f64>, x: Vec<f64>, order: Option<usize>) -> PyResult<f64> {
        match order {
            None => theory::two_layer_forward(&self.inner, &w, &x),
            Some(k) => theory::taylorized_two_layer_forward(&self.inner, k, &w, &x),
        }
        .map_err(err)
    }

    /// `(Θ̂, λ_min)` at the initial weights.
    #[pyo3(signature = (x, order = None))]
    fn ntk(&self, x: &PyTensor, order: Option<usize>) -> PyResult<(PyTensor, f64)> {
        let k = theory::empirical_ntk(&self.inner, model_kind(order), self.inner.w0(), &x.inner).map_err(err)?;
        Ok((PyTensor { inner: k.theta }, k.lambda_min))
    }

    /// Integrates gradient flow; returns `(times, residual norms, final W)`.
    #[pyo3(signature = (x, y, t0, order = None, eta0 = 1.0, h = 0.1))]
    fn flow(
        &self,
        x: &PyTensor,
        y: Vec<f64>,
        t0: f64,
        order: Option<usize>,
        eta0: f64,
        h: f64,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let traj = theory::gradient_flow_integrate(
            &self.inner,
            model_kind(order),
            &x.inner,
            &y,
            &GradientFlowConfig::new(eta0, t0, h),
        )
        .map_err(err)?;
        let last = traj.weights.last().cloned().unwrap_or_default();
        Ok((traj.times.clone(), traj.residual_norms(), last))
    }
}

/// Runs the experiment described by a TOML config and returns its summary
/// as JSON text.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run_experiment(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config).map_err(err)?;
    let base = config.parent().map(PathBuf::from).unwrap_or_default();
    let out = taylorlab::exp::resolve_out_dir(&cfg, out.as_deref(), &base);
    let outcome = py.detach(|| taylorlab::exp::run_experiment(&cfg, &base, &out)).map_err(err)?;
    serde_json::to_string(&outcome.summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn taylorlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyParamSet>()?;
    m.add_class::<PyTwoLayerNet>()?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(cos_param, m)?)?;
    m.add_function(wrap_pyfunction!(cos_func, m)?)?;
    m.add_function(wrap_pyfunction!(demean_logits, m)?)?;
    m.add_function(wrap_pyfunction!(pca_embed, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("MAX_ORDER", taylorlab::MAX_ORDER)?;
    Ok(())
}
