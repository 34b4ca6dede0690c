use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use xssl_core::affinity::{gram_loss_value, GramMode};
use xssl_core::config::TrainConfig;
use xssl_core::gradcheck_suite::gradcheck_suite;
use xssl_core::hosts::ema_update;
use xssl_core::params::ParamStore;
use xssl_core::patch_grid::{hr_patch_set, PatchGrid};
use xssl_core::pipeline::{cmd_cluster, cmd_gen_data, cmd_pretrain, cmd_probe, SplitSizes};
use xssl_core::probe::{compute_miou, hierarchical_cluster};
use xssl_core::synth::{self, SynthConfig};
use xssl_core::tensor::Tensor;
use xssl_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

/// Synthetic scene generator settings.
#[pyclass(name = "SynthConfig", from_py_object)]
#[derive(Clone)]
struct PySynthConfig(SynthConfig);

#[pymethods]
impl PySynthConfig {
    #[new]
    fn new() -> Self {
        PySynthConfig(SynthConfig::default())
    }

    /// Applies a `synth.*` or `sensor.*` override.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    #[getter]
    fn mr_shape(&self) -> (usize, usize) {
        (self.0.mr_h, self.0.mr_w)
    }

    #[getter]
    fn hr_shape(&self) -> (usize, usize) {
        self.0.hr_dims()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.0.s()
    }
}

/// One co-registered HR/MR scene; rasters are flat band-major lists.
#[pyclass(name = "Scene")]
struct PyScene(synth::PairedScene);

#[pymethods]
impl PyScene {
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn hr_shape(&self) -> (usize, usize, usize) {
        (self.0.hr.bands, self.0.hr.height, self.0.hr.width)
    }

    #[getter]
    fn mr_shape(&self) -> (usize, usize, usize) {
        (self.0.mr.bands, self.0.mr.height, self.0.mr.width)
    }

    #[getter]
    fn hr(&self) -> Vec<f64> {
        self.0.hr.data.clone()
    }

    #[getter]
    fn mr(&self) -> Vec<f64> {
        self.0.mr.data.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.0.labels.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_scene(seed: u64, config: Option<PySynthConfig>) -> PyResult<PyScene> {
    let cfg = config.map_or_else(SynthConfig::default, |c| c.0);
    synth::generate_scene(seed, &cfg).map(PyScene).map_err(py_err)
}

/// Run configuration; starts from the desk defaults of `host`.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(TrainConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (host="ijepa"))]
    fn new(host: &str) -> PyResult<Self> {
        Ok(PyTrainConfig(TrainConfig::desk(host.parse().map_err(py_err)?)))
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        TrainConfig::parse(text).map(PyTrainConfig).map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(py_err)?;
        self.0.validate().map_err(py_err)
    }

    fn canonical_text(&self) -> String {
        self.0.canonical_text()
    }

    fn digest(&self) -> String {
        self.0.digest_hex()
    }

    #[getter]
    fn host(&self) -> String {
        self.0.host.to_string()
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.variant.to_string()
    }
}

/// Gram-matrix loss between student and teacher patch representations.
#[pyfunction]
#[pyo3(signature = (zs, zt, mode="mean"))]
fn gram_loss(zs: Vec<Vec<f64>>, zt: Vec<Vec<f64>>, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "mean" => GramMode::Mean,
        "sum" => GramMode::Sum,
        _ => return Err(PyValueError::new_err(format!("unknown gram mode {mode:?}"))),
    };
    gram_loss_value(&matrix(zs)?, &matrix(zt)?, mode).map_err(py_err)
}

/// HR patch coordinates covered by MR patch (u, v).
#[pyfunction]
fn hr_patches_of(u: usize, v: usize, s: usize, grid_h: usize, grid_w: usize) -> PyResult<Vec<(usize, usize)>> {
    let g = PatchGrid::new(grid_h, grid_w, 1).map_err(py_err)?;
    hr_patch_set(u, v, s, &g).map_err(py_err)
}

/// `m·target + (1−m)·student` elementwise.
#[pyfunction]
fn ema(target: Vec<f64>, student: Vec<f64>, m: f64) -> PyResult<Vec<f64>> {
    let one = |v: Vec<f64>| -> PyResult<ParamStore> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::matrix(1, v.len(), v)).map_err(py_err)?;
        Ok(s)
    };
    let mut t = one(target)?;
    ema_update(&mut t, &one(student)?, m).map_err(py_err)?;
    Ok(t.flatten())
}

/// (mIoU, per-class IoU with None for classes absent from both).
#[pyfunction]
fn miou(preds: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let r = compute_miou(&preds, &labels, k).map_err(py_err)?;
    Ok((r.miou, r.per_class))
}

#[pyfunction]
fn cluster(reps: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    hierarchical_cluster(&matrix(reps)?, k).map_err(py_err)
}

/// Per-check rows (name, max relative error, tolerance, passed).
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64, f64, bool)>> {
    let r = gradcheck_suite(None).map_err(py_err)?;
    Ok(r.rows.iter().map(|c| (c.name.clone(), c.max_rel_error, c.tolerance, c.passed())).collect())
}

#[pyfunction]
#[pyo3(signature = (out, seed=0, scenes=512, probe_scenes=128, config=None, force=false))]
fn gen_data(out: PathBuf, seed: u64, scenes: usize, probe_scenes: usize, config: Option<PySynthConfig>, force: bool) -> PyResult<()> {
    let cfg = config.map_or_else(SynthConfig::default, |c| c.0);
    let sizes = SplitSizes {
        train: scenes,
        probe_train: probe_scenes,
        probe_test: probe_scenes,
    };
    cmd_gen_data(&out, &cfg, seed, sizes, force).map_err(py_err)
}

/// Trains and returns the checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, data, out, force=false))]
fn pretrain(py: Python<'_>, config: PyTrainConfig, data: PathBuf, out: PathBuf, force: bool) -> PyResult<String> {
    let o = py
        .detach(|| cmd_pretrain(&config.0, &data, &out, force, None))
        .map_err(py_err)?;
    Ok(o.checkpoint.display().to_string())
}

/// Probes a checkpoint; returns the mIoU of each seed.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, data, out, seeds=vec![0, 1, 2]))]
fn probe(py: Python<'_>, config: PyTrainConfig, checkpoint: PathBuf, data: PathBuf, out: PathBuf, seeds: Vec<u64>) -> PyResult<Vec<f64>> {
    let o = py
        .detach(|| cmd_probe(&config.0, &checkpoint, &data, &seeds, &out))
        .map_err(py_err)?;
    Ok(o.reports.iter().map(|r| r.miou).collect())
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint, data, out, scene=0, k=3))]
fn cluster_map(config: PyTrainConfig, checkpoint: PathBuf, data: PathBuf, out: PathBuf, scene: usize, k: usize) -> PyResult<Vec<usize>> {
    cmd_cluster(&config.0, &checkpoint, &data, scene, k, &out).map_err(py_err)
}

#[pymodule]
fn xssl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySynthConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(gram_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hr_patches_of, m)?)?;
    m.add_function(wrap_pyfunction!(ema, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_map, m)?)?;
    Ok(())
}
