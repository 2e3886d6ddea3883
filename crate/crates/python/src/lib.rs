//! Python bindings for the two-branch joint training engine.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use invjoint_core::data::{generate as generate_data, DataFormat, Dataset as CoreDataset};
use invjoint_core::fusion::{EvalRecord, FusionMode};
use invjoint_core::gradcheck::run_suite;
use invjoint_core::harness::{
    ablate as run_ablation, ablation_csv, evaluate_model, metrics_jsonl, train as run_training, AblationGrid,
    Checkpoint as CoreCheckpoint, RunConfig,
};
use invjoint_core::Error;

create_exception!(invjoint, InvJointError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => InvJointError::new_err(e.to_string()),
    }
}

/// Default config with optional TOML text and seed applied.
fn run_config(config: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let cfg = match config {
        Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn fusion_mode(name: &str) -> PyResult<FusionMode> {
    match name {
        "mul" => Ok(FusionMode::Multiplicative),
        "add" => Ok(FusionMode::Additive),
        other => Err(PyValueError::new_err(format!(
            "fusion must be 'mul' or 'add', got {other:?}"
        ))),
    }
}

fn eval_dict<'py>(py: Python<'py>, e: &EvalRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("acc2", e.acc2)?;
    d.set_item("acc3", e.acc3)?;
    d.set_item("acc_joint", e.acc_joint)?;
    d.set_item("conflict_ratio", e.conflict_ratio)?;
    d.set_item("labels", e.labels.clone())?;
    d.set_item("pred2", e.pred2.clone())?;
    d.set_item("pred3", e.pred3.clone())?;
    d.set_item("pred_joint", e.pred_joint.clone())?;
    d.set_item("confusion_joint", e.confusion_joint.clone())?;
    Ok(d)
}

/// A generated or loaded synthetic two-modality dataset.
#[pyclass(module = "invjoint", frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDataset::load(&path).map_err(py_err)?,
        })
    }

    /// Writes the dataset; `format` is "binary" or "text".
    #[pyo3(signature = (path, format = "binary"))]
    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        let format = match format {
            "binary" => DataFormat::Binary,
            "text" => DataFormat::Text,
            other => return Err(PyValueError::new_err(format!("unknown format {other:?}"))),
        };
        self.inner.save(&path, format).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config.seed
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.config.classes
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    /// Test-split 3D features, one list per sample.
    fn test_x3(&self) -> Vec<Vec<f64>> {
        self.inner.test.iter().map(|s| s.x3.clone()).collect()
    }

    fn test_labels(&self) -> Vec<usize> {
        self.inner.test.iter().map(|s| s.label).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(classes={}, train={}, test={}, seed={})",
            self.inner.config.classes,
            self.inner.train.len(),
            self.inner.test.len(),
            self.inner.config.seed
        )
    }
}

/// Trained parameters plus the configuration that produced them.
#[pyclass(module = "invjoint", frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
    metrics: Option<String>,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(&path).map_err(py_err)?,
            metrics: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Run configuration as TOML.
    fn config(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(py_err)
    }

    /// Line-delimited metrics log of the run, if this checkpoint was trained
    /// in this process.
    #[getter]
    fn metrics_jsonl(&self) -> Option<String> {
        self.metrics.clone()
    }

    /// Mean sigmoid gate weight per feature dimension.
    fn gate_weights(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.model().map_err(py_err)?.gate_weights())
    }

    /// Evaluates on the test split; `phi` and `fusion` default to the
    /// training settings.
    #[pyo3(signature = (data, phi = None, fusion = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        phi: Option<f64>,
        fusion: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let model = self.inner.model().map_err(py_err)?;
        let mut cfg = self.inner.config.fusion;
        cfg.phi = phi.unwrap_or(cfg.phi);
        if let Some(name) = fusion {
            cfg.mode = fusion_mode(name)?;
        }
        cfg.validate().map_err(py_err)?;
        let eval = evaluate_model(&model, &data.inner.test, &cfg).map_err(py_err)?;
        eval_dict(py, &eval)
    }
}

/// The default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(py_err)
}

/// Generates a dataset from the generator section of `config` (TOML).
#[pyfunction]
#[pyo3(signature = (config = None, seed = None))]
fn generate(config: Option<&str>, seed: Option<u64>) -> PyResult<Dataset> {
    let cfg = run_config(config, seed)?;
    Ok(Dataset {
        inner: generate_data(&cfg.generator).map_err(py_err)?,
    })
}

/// Trains on `data` and returns the checkpoint. The generator settings come
/// from the dataset.
#[pyfunction]
#[pyo3(signature = (data, config = None, seed = None))]
fn train(py: Python<'_>, data: &Dataset, config: Option<&str>, seed: Option<u64>) -> PyResult<Checkpoint> {
    let mut cfg = run_config(config, seed)?;
    cfg.generator = data.inner.config;
    let run = py.detach(|| run_training(&cfg, &data.inner)).map_err(py_err)?;
    Ok(Checkpoint {
        metrics: Some(metrics_jsonl(&run.records).map_err(py_err)?),
        inner: CoreCheckpoint::new(&cfg, &run.model, run.optimizer, run.epoch),
    })
}

/// Runs an ablation grid (TOML) and returns the results table as CSV.
#[pyfunction]
#[pyo3(signature = (grid, config = None))]
fn ablate(py: Python<'_>, grid: &str, config: Option<&str>) -> PyResult<String> {
    let cfg = run_config(config, None)?;
    let grid = AblationGrid::from_toml(grid).map_err(py_err)?;
    let rows = py.detach(|| run_ablation(&cfg, &grid)).map_err(py_err)?;
    Ok(ablation_csv(&rows))
}

/// Finite-difference check of every loss gradient: a list of
/// `(name, max_relative_error, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (configs = 20, seed = 0))]
fn gradcheck(configs: usize, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let report = run_suite(configs, seed).map_err(py_err)?;
    Ok(report
        .checks
        .iter()
        .map(|c| (c.name.to_string(), c.max_relative_error, c.tolerance, c.passed()))
        .collect())
}

#[pymodule]
fn invjoint(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InvJointError", m.py().get_type::<InvJointError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
