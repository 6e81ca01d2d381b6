//! Python module `lisnet`: channels, pilots, LS estimation, datasets,
//! training and sweeps.

use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lisnet::channel::{draw_channels as draw, ChannelRealization};
use lisnet::config::ScenarioConfig;
use lisnet::dataset::{generate, Dataset, GenParams, SampleKind};
use lisnet::eval::{run_sweep as sweep, Nets, SweepResult, SweepSpec};
use lisnet::ls::{EstimateMethod, LsEstimator};
use lisnet::nn::{fit, scaled_channelnet, Checkpoint, LayerSpec, TrainConfig};
use lisnet::pilots::{make_pilots as pilots, run_protocol as protocol, PilotMatrix, ProtocolParams, ReceivedPilots};
use lisnet::rng::seeded;
use lisnet::{CMatrix, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension(_) | Error::IndexOutOfRange { .. } | Error::Format { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &CMatrix) -> Vec<Vec<Complex64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<Complex64>]) -> PyResult<CMatrix> {
    let cols = r.first().map_or(0, |x| x.len());
    if r.iter().any(|x| x.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(CMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

/// Scenario parameters (M, L, K, P, path counts, noise, seed).
#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario(ScenarioConfig);

#[pymethods]
impl PyScenario {
    /// The desk-scale scenario: M=16, L=8, K=2, P=16.
    #[staticmethod]
    fn desk() -> Self {
        PyScenario(ScenarioConfig::desk())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ScenarioConfig::from_json_str(text).map(PyScenario).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }
    #[getter]
    fn l(&self) -> usize {
        self.0.l
    }
    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }
    #[getter]
    fn p(&self) -> usize {
        self.0.p
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!("Scenario(M={}, L={}, K={}, P={}, seed={})", self.0.m, self.0.l, self.0.k, self.0.p, self.0.seed)
    }
}

/// One draw of every channel of every user.
#[pyclass(name = "Realization", frozen)]
struct PyRealization(ChannelRealization);

#[pymethods]
impl PyRealization {
    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    /// Direct channel of user `k` (length M).
    fn direct(&self, k: usize) -> PyResult<Vec<Complex64>> {
        let u = self.0.users.get(k).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
        Ok(u.h_direct.iter().copied().collect())
    }

    /// Cascaded channel of user `k` as M rows of L entries.
    fn cascaded(&self, k: usize) -> PyResult<Vec<Vec<Complex64>>> {
        let u = self.0.users.get(k).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
        Ok(rows(&u.g_cascaded))
    }
}

#[pyfunction]
fn draw_channels(scenario: &PyScenario, seed: u64) -> PyResult<PyRealization> {
    draw(&scenario.0, &mut seeded(seed)).map(PyRealization).map_err(py_err)
}

/// Orthogonal DFT pilots; `l` also builds the joint ML x ML matrix.
#[pyclass(name = "Pilots", frozen)]
struct PyPilots(PilotMatrix);

#[pymethods]
impl PyPilots {
    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }
    #[getter]
    fn p(&self) -> usize {
        self.0.p()
    }
    fn matrix(&self) -> Vec<Vec<Complex64>> {
        rows(&self.0.x)
    }
}

#[pyfunction]
#[pyo3(signature = (m, p, l=None))]
fn make_pilots(m: usize, p: usize, l: Option<usize>) -> PyResult<PyPilots> {
    pilots(m, p, l).map(PyPilots).map_err(py_err)
}

#[pyclass(name = "Received", frozen)]
struct PyReceived(ReceivedPilots);

#[pymethods]
impl PyReceived {
    #[getter]
    fn snr_db(&self) -> f64 {
        self.0.snr_db
    }
    /// Phase-I signal of user `k`.
    fn direct(&self, k: usize) -> PyResult<Vec<Complex64>> {
        let u = self.0.users.get(k).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
        Ok(u.y_direct.iter().copied().collect())
    }
}

#[pyfunction]
#[pyo3(signature = (realization, pilots, noise_power, seed, eps_on=0.0, eps_off=0.0))]
fn run_protocol(
    realization: &PyRealization,
    pilots: &PyPilots,
    noise_power: f64,
    seed: u64,
    eps_on: f64,
    eps_off: f64,
) -> PyResult<PyReceived> {
    let params = ProtocolParams { noise_power, eps_on, eps_off, joint: pilots.0.x_bar.is_some() };
    protocol(&realization.0, &pilots.0, &params, &mut seeded(seed)).map(PyReceived).map_err(py_err)
}

/// LS estimate `(h_direct, G)` of one user; `method` is `ls_per_column` or `ls_joint`.
#[pyfunction]
#[pyo3(signature = (pilots, received, user, method="ls_per_column"))]
fn ls_estimate(
    pilots: &PyPilots,
    received: &PyReceived,
    user: usize,
    method: &str,
) -> PyResult<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
    let method = match method {
        "ls_per_column" => EstimateMethod::LsPerColumn,
        "ls_joint" => EstimateMethod::LsJoint,
        other => return Err(PyValueError::new_err(format!("unknown LS method `{other}`"))),
    };
    let rx = received.0.users.get(user).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
    let est = LsEstimator::new(&pilots.0).and_then(|ls| ls.estimate(rx, method)).map_err(py_err)?;
    Ok((est.h_direct_hat.iter().copied().collect(), rows(&est.g_hat)))
}

/// Mean over estimates of `‖truth − est‖_F / ‖truth‖_F`.
#[pyfunction]
#[pyo3(signature = (truth, estimates, squared=false))]
fn nmse(truth: Vec<Vec<Complex64>>, estimates: Vec<Vec<Vec<Complex64>>>, squared: bool) -> PyResult<f64> {
    let t = from_rows(&truth)?;
    let e = estimates.iter().map(|x| from_rows(x)).collect::<PyResult<Vec<_>>>()?;
    lisnet::eval::nmse(&t, &e, squared).map_err(py_err)
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.0.len()
    }
    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind {
            SampleKind::Direct => "direct",
            SampleKind::Cascaded => "cascaded",
        }
    }
    /// `(rows, cols, label_len)` of the samples.
    fn dims(&self) -> Option<(usize, usize, usize)> {
        self.0.dims()
    }
    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Dataset::load(path).map(PyDataset).map_err(py_err)
    }
}

/// Direct and cascaded datasets from a generation config given as JSON.
#[pyfunction]
fn generate_datasets(scenario: &PyScenario, generation_json: &str) -> PyResult<(PyDataset, PyDataset)> {
    let gen: GenParams = serde_json::from_str(generation_json).map_err(json_err)?;
    let (d, c) = generate(&scenario.0, &gen).map_err(py_err)?;
    Ok((PyDataset(d), PyDataset(c)))
}

#[pyclass(name = "Network", frozen)]
struct PyNetwork(Checkpoint);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Checkpoint::load(path).map(PyNetwork).map_err(py_err)
    }
    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }
    #[getter]
    fn param_count(&self) -> usize {
        self.0.net.net.param_count()
    }
    /// Per-epoch `(train_loss, val_mse, val_nmse)`.
    fn log(&self) -> Vec<(f64, f64, f64)> {
        self.0.log.epochs.iter().map(|e| (e.train_loss, e.val_mse, e.val_nmse)).collect()
    }
    /// Direct-channel estimate for one user of a protocol run.
    fn predict_direct(&self, received: &PyReceived, user: usize) -> PyResult<Vec<Complex64>> {
        let rx = received.0.users.get(user).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
        Ok(self.0.net.predict_direct(rx).map_err(py_err)?.iter().copied().collect())
    }
    /// Cascaded-channel estimate (M rows of L entries) for one user.
    fn predict_cascaded(&self, received: &PyReceived, user: usize) -> PyResult<Vec<Vec<Complex64>>> {
        let rx = received.0.users.get(user).ok_or_else(|| PyValueError::new_err("user index out of range"))?;
        Ok(rows(&self.0.net.predict_cascaded(rx).map_err(py_err)?))
    }
}

/// Trains a ChannelNet-shaped network. `layers_json` overrides the widths.
#[pyfunction]
#[pyo3(signature = (dataset, training_json="{}", filters=256, fc1=1024, fc2=2048, layers_json=None))]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    training_json: &str,
    filters: usize,
    fc1: usize,
    fc2: usize,
    layers_json: Option<&str>,
) -> PyResult<PyNetwork> {
    let cfg: TrainConfig = serde_json::from_str(training_json).map_err(json_err)?;
    let specs: Vec<LayerSpec> = match layers_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => scaled_channelnet(filters, fc1, fc2),
    };
    let ds = &dataset.0;
    let (net, log) = py.detach(|| fit(ds, &specs, &cfg, |_| {})).map_err(py_err)?;
    Ok(PyNetwork(Checkpoint { net, training: cfg, log }))
}

#[pyclass(name = "SweepResult", frozen)]
struct PySweepResult(SweepResult);

#[pymethods]
impl PySweepResult {
    /// `(grid_value, estimator, target, nmse)` per row.
    fn rows(&self) -> Vec<(f64, &'static str, &'static str, f64)> {
        self.0
            .rows
            .iter()
            .map(|r| {
                let target = match r.target {
                    lisnet::eval::Target::Direct => "direct",
                    lisnet::eval::Target::Cascaded => "cascaded",
                };
                (r.grid_value, r.estimator.name(), target, r.nmse)
            })
            .collect()
    }
    fn to_csv(&self) -> PyResult<String> {
        let bytes = self.0.to_csv().map_err(py_err)?;
        String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
    fn to_json(&self) -> PyResult<String> {
        let bytes = self.0.to_json().map_err(py_err)?;
        String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (spec_json, scenario, direct=None, cascaded=None))]
fn run_sweep(
    py: Python<'_>,
    spec_json: &str,
    scenario: &PyScenario,
    direct: Option<&PyNetwork>,
    cascaded: Option<&PyNetwork>,
) -> PyResult<PySweepResult> {
    let spec: SweepSpec = serde_json::from_str(spec_json).map_err(json_err)?;
    let nets = Nets { direct: direct.map(|n| &n.0.net), cascaded: cascaded.map(|n| &n.0.net) };
    let sc = &scenario.0;
    py.detach(|| sweep(&spec, sc, nets)).map(PySweepResult).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "lisnet")]
fn lisnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRealization>()?;
    m.add_class::<PyPilots>()?;
    m.add_class::<PyReceived>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PySweepResult>()?;
    m.add_function(wrap_pyfunction!(draw_channels, m)?)?;
    m.add_function(wrap_pyfunction!(make_pilots, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(ls_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_datasets, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
