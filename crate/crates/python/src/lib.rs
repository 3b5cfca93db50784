//! Python module `perforated_py`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use perforated::config::RunConfig;
use perforated::data::{gen_two_spirals, Labels};
use perforated::grad::finite_diff_check;
use perforated::orchestrator::AblationMode;
use perforated::store::read_checkpoint;
use perforated::{Error, LossKind, Network, NetworkSpec, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Network(_) | Error::Precondition(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn batch_tensor(net: &Network, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let width: usize = net.input_shape().iter().product();
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("expected rows of {width} values, got {}", r.len())));
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(net.input_shape());
    Tensor::new(shape, rows.concat()).map_err(py_err)
}

#[pyclass(name = "Network", module = "perforated_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// Builds a network from a JSON layer spec such as
    /// `{"input_shape": [2], "layers": [{"type": "dense", "out_width": 1}]}`.
    #[new]
    #[pyo3(signature = (spec_json, seed = 0))]
    fn new(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec: NetworkSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyNetwork {
            inner: Network::new(spec, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, width_scale = 1.0, seed = 0))]
    fn mnist_classifier(classes: usize, width_scale: f64, seed: u64) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: Network::new(NetworkSpec::mnist_classifier(classes, width_scale), seed).map_err(py_err)?,
        })
    }

    /// Network stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: read_checkpoint(&path).map_err(py_err)?.network,
        })
    }

    fn spec_json(&self) -> String {
        serde_json::to_string(self.inner.spec()).expect("spec serializes")
    }

    /// Eval-mode outputs, one row per input row (inputs flattened per sample).
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = batch_tensor(&self.inner, rows)?;
        let y = self.inner.predict(&x).map_err(py_err)?;
        Ok((0..y.rows()).map(|i| y.row(i).to_vec()).collect())
    }

    /// `(neuron_params, dendrite_params)`.
    fn param_count(&self) -> (usize, usize) {
        let c = self.inner.param_count();
        (c.neuron_params, c.dendrite_params)
    }

    fn host_layers(&self) -> Vec<usize> {
        self.inner.host_layers()
    }

    fn dendrite_depth(&self, layer: usize) -> usize {
        self.inner.dendrite_depth(layer)
    }

    fn neuron_digest(&self) -> String {
        self.inner.neuron_digest()
    }

    /// Appends `generations` random dendrite generations to every host layer.
    #[pyo3(signature = (generations = 1, seed = 0))]
    fn add_random_dendrites(&mut self, generations: usize, seed: u64) -> PyResult<()> {
        perforated::synth::add_random_dendrites(&mut self.inner, generations, false, seed).map_err(py_err)
    }

    /// Largest relative error between analytic and central-difference
    /// gradients of the softmax cross-entropy loss.
    #[pyo3(signature = (rows, classes, detach_dendrites = false, eps = 1e-6))]
    fn finite_diff_check(&self, rows: Vec<Vec<f64>>, classes: Vec<usize>, detach_dendrites: bool, eps: f64) -> PyResult<f64> {
        let x = batch_tensor(&self.inner, rows)?;
        finite_diff_check(
            &self.inner,
            LossKind::CrossEntropySoftmax,
            &x,
            &Labels::Classes(classes),
            detach_dendrites,
            eps,
        )
        .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.param_count();
        format!(
            "Network(input={:?}, output={:?}, neuron_params={}, dendrite_params={})",
            self.inner.input_shape(),
            self.inner.output_shape(),
            c.neuron_params,
            c.dendrite_params
        )
    }
}

/// Two interleaved spirals: `(rows, labels)`.
#[pyfunction]
#[pyo3(signature = (n_per_class, noise = 0.0, seed = 0))]
fn two_spirals(n_per_class: usize, noise: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = gen_two_spirals(n_per_class, noise, seed).map_err(py_err)?;
    let rows = (0..ds.len()).map(|i| ds.inputs.row(i).to_vec()).collect();
    Ok((rows, ds.labels.classes().expect("class labels").to_vec()))
}

#[pyfunction]
fn dendrite_delta(g_in_k: f64, g_bar: f64, delta_i: f64, delta_bar: f64) -> f64 {
    perforated::dendrites::dendrite_delta(g_in_k, g_bar, delta_i, delta_bar)
}

/// Absolute Pearson correlation of a candidate's activations with its host's deltas.
#[pyfunction]
fn correlation_score(activations: Vec<f64>, deltas: Vec<f64>) -> PyResult<f64> {
    perforated::dendrites::correlation_score(&activations, &deltas).map_err(py_err)
}

#[pyfunction]
fn ablation_modes() -> Vec<&'static str> {
    AblationMode::ALL.iter().map(|m| m.name()).collect()
}

/// Runs the experiment described by a config file and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_path, overrides = Vec::new(), run_root = None))]
fn train(py: Python<'_>, config_path: PathBuf, overrides: Vec<String>, run_root: Option<PathBuf>) -> PyResult<String> {
    py.detach(|| {
        let cfg = RunConfig::from_file(Path::new(&config_path), &overrides)?;
        let splits = cfg.data.load(&cfg.split)?;
        let root = run_root.unwrap_or_else(|| cfg.run_root());
        let out = perforated_cli::train(&cfg, &splits, &root)?;
        Ok(serde_json::to_string(&out.report)?)
    })
    .map_err(py_err)
}

#[pymodule]
fn perforated_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(two_spirals, m)?)?;
    m.add_function(wrap_pyfunction!(dendrite_delta, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_score, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_modes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
